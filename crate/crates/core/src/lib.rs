pub mod consistency;
pub mod corpus;
pub mod extract;
pub mod gateway;
pub mod retrieval;
pub mod synthesis;
pub mod reader;
pub mod config;
pub mod eval;
pub mod cli;
