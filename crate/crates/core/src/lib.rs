pub mod diffnum;
pub mod diffusion;
pub mod networks;
pub mod sampler;
pub mod synthlab;
#[cfg(test)]
pub(crate) mod testutil;
