pub mod align;
pub mod ar;
pub mod ckpt;
pub mod error;
pub mod eval;
pub mod nar;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prefs;
pub mod train;
pub mod rng;
pub mod self_improve;
pub mod world;

mod binio;

pub use error::{Error, Result};
pub use world::{LayeredTokens, Token, Utterance, World, WorldConfig};
