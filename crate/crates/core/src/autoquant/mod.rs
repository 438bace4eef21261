pub mod scheme;
pub mod search;

pub use scheme::{FallbackPrecision, GlobalScheme, LayerAction, LayerOverride, QuantScheme, TablePolicy};
pub use search::{run_search, SearchConfig, SearchOutcome, SearchResult, Status};
