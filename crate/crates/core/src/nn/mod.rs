//! Layers, parameter storage and initialization.

mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{load_params, read_params, save_params, write_params};
pub use layers::{BatchNorm, Conv2d, Dense, BN_EPSILON, BN_MOMENTUM};
pub use params::{
    init_params, init_with_rng, Init, Mode, ParamEntry, ParamId, ParamStore, Session, StatUpdate,
};
