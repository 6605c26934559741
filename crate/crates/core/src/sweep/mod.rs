//! Parameter sweeps over the task model and the template wizard.

mod run;
mod template;
mod wizard;

pub use run::{combination_spec, run_sweep, SweepEntry, SweepProgress, SweepReport, SweepRunError};
pub use template::{
    is_identifier, placeholders, substitute, Combination, CommandTemplate, DomainKind, ParameterDomain, SweepError,
    TaskTemplate,
};
pub use wizard::Wizard;
