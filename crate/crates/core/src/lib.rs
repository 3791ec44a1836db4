pub mod attnbase;
pub mod diffcore;
pub mod encoders;
pub mod envsim;
pub mod harness;
pub mod policy;
pub mod ppo;
pub mod ssm;
