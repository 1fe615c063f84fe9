#![allow(dead_code)]

pub mod gradcheck;
pub mod netprobe;
pub mod oracles;
