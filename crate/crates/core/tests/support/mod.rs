#![allow(dead_code)]

pub mod margins;
pub mod moments;
pub mod qcqp_oracle;
