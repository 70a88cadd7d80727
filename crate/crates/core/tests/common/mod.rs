#![allow(dead_code)]

pub mod gradcheck;
pub mod messages;
pub mod mfcc_oracle;
