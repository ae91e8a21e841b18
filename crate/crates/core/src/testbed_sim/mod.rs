//! Synthetic engine testbed: driving cycles, run simulation, fault injection and
//! the five-file corpus format.

mod corpus;
mod cycle;
mod engine;
mod fault;

pub use corpus::{
    build_run, drop_input_samples, generate_dataset, read_table, write_run, write_table,
    CorpusConfig, CorpusSummary, RunMeta, RunSlot, META_FILE, TABLE_FILES,
};
pub use cycle::{generate_cycle, DrivingCycle};
pub use engine::{
    simulate_run, SimConfig, SimulationRun, Table, INPUT_CHANNELS, OMEGA_CHANNEL, OUTPUT_CHANNELS,
    STATE_CHANNELS, TORQUE_CHANNEL,
};
pub use fault::{
    default_templates, inject_fault, FaultShape, FaultSpec, FaultTemplate, Site, DEFAULT_MAGNITUDE,
    PERIODIC_PERIOD_S,
};
