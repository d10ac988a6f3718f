use thiserror::Error;
#[derive(Debug, Error)]
pub enum MetricError {
    #[error("placeholder")]
    Placeholder,
}
