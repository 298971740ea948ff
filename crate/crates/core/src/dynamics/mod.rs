//! Control-affine benchmark systems, data generation and closed-loop simulation.

mod cost;
mod dataset;
mod grid;
mod simulate;
mod systems;

pub use cost::StageCost;
pub use dataset::{
    generate_dataset, read_dataset, write_dataset, GeneratorDataset, LabelMode, DEFAULT_FD_STEP,
};
pub use grid::{GridAxis, StateEmbedding, StateGridSpec};
pub use simulate::{
    accumulated_cost, rk4_step, simulate_closed_loop, SimulationConfig, Trajectory,
    DEFAULT_BLOWUP_BOUND,
};
pub use systems::{
    Cartpole, CartpoleParams, ControlAffine, ControlAffineSystem, FnSystem, LinearSystem,
    Pendulum, PendulumParams,
};
