//! Command-line front end for training, translating and evaluating guided
//! diffusion models on synthetic disk scenes.

pub mod commands;
pub mod desk;
pub mod evaluate;
pub mod exit;
pub mod manifest;
pub mod models;
pub mod recipe;
pub mod verify;
