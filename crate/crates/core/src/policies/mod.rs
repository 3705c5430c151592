//! Dosing policies that do not plan over the grade tree: standard,
//! PK-guided, MAP-guided and DA-guided.

pub mod da;
pub mod grid;
pub mod map;
pub mod pk;
pub mod reward;
pub mod search;
pub mod standard;

pub use da::{da_guided_dose, DaDose, RiskPoint, RiskProfile};
pub use grid::DoseGrid;
pub use map::{map_guided_dose, MapDose, MapMode, MapPredictor};
pub use pk::{estimate_exposure, PkGuidedRuleTable};
pub use reward::{RewardSpec, UtilityCurve};
pub use standard::StandardRule;
