pub mod oracles;
pub mod payloads;
