use thiserror::Error;
#[derive(Debug, Error)]
pub enum DataError {
    #[error("placeholder")]
    Placeholder,
}
