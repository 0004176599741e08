//! Experiment orchestration: configuration, the teacher -> student pipeline,
//! sweeps and exports.

pub mod config;
pub mod export;
pub mod pipeline;
pub mod report;
pub mod seeds;
pub mod stats;
pub mod sweep;

pub use config::{
    AppliedWhen, Axis, ExperimentConfig, InitTag, ModelSide, PerturbTarget, PerturbationSpec, ProbeSpec, SweepSpec,
    TrainingSpec,
};
pub use pipeline::{
    build_pair, distill_student, evaluate, evaluate_run, first_epoch_update_cosine, load_teacher, prepare_student,
    run_experiment, save_teacher, test_latents, train_teacher, update_cosine, Dataset, DistilledStudent, Lab,
    PreparedStudent, TeacherSummary, TrainedTeacher,
};
pub use report::{HeadCosines, ModelProbe, PosthocPoint, RunRecord, RunReport, RunStatus};
pub use seeds::Stream;
pub use stats::bootstrap_ci;
