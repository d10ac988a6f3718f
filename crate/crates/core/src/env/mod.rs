use thiserror::Error;
#[derive(Debug, Error)]
pub enum EnvError {
    #[error("placeholder")]
    Placeholder,
}
