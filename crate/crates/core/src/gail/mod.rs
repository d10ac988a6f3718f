use thiserror::Error;
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("placeholder")]
    Placeholder,
}
