//! Goal-directed navigation: A* on an inflated static costmap, DWA against a
//! rolling LiDAR-fed local costmap.

pub mod costmap;
pub mod dwa;
pub mod local;
pub mod navigate;
pub mod planner;

pub use costmap::{build_costmap, Costmap, CostmapParams, INSCRIBED, LETHAL};
pub use dwa::{plan_local, DwaDecision, DwaParams};
pub use local::{LocalCostmap, StaticLayer};
pub use navigate::{navigate, reference_length, NavOutcome, NavParams, NavStatus, NavTick};
pub use planner::{plan_dijkstra, plan_global, Path, PlannerParams};
