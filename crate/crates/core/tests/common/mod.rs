#![allow(dead_code)]

pub mod grads;
pub mod oracle;
