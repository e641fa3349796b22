pub mod arith;
pub mod audit;
pub mod dropout;
pub mod encoding;
pub mod fedavg;
pub mod fixedpoint;
pub mod pctd;
pub mod prime;
pub mod protocols;
pub mod rewards;
pub mod seeds;
pub mod sim;
