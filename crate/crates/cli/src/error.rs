use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("stage `{stage}` needs the output of `{upstream}`, which has not run in {out}")]
    Dependency { stage: String, upstream: String, out: String },
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: String,
        #[source]
        source: anyhow::Error,
    },
}
