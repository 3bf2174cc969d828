pub mod config;
pub mod controllers;
pub mod nmpc;
pub mod qp;
pub mod report;
pub mod sim;
pub mod tank_model;
