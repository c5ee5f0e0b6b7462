//! Typed wrapper over the gateway's HTTP endpoints.

use futures::{Stream, StreamExt, TryStreamExt};
use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use cowork_core::affect::{AffectiveSample, Metric};
use cowork_core::eeg::EegWindow;
use cowork_core::events::Alert;
use cowork_core::executor::ExecutionStatus;
use cowork_core::gateway::wire::{BlockRequest, ControlRequest, ErrorBody, OverrideRequest, StreamEvent, API_PREFIX};
use cowork_core::scenario::ControlCommand;
use cowork_core::system::InputOutcome;
use cowork_core::world::Block;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{status}: {message}")]
    Status { status: StatusCode, message: String },
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("bad stream line: {0}")]
    Stream(#[from] serde_json::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base` is the server origin, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client { http: reqwest::Client::new(), base: base.into().trim_end_matches('/').to_string() }
    }

    pub fn local(port: u16) -> Self {
        Self::new(format!("http://127.0.0.1:{port}"))
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}{}", self.base, API_PREFIX, path)
    }

    async fn check(resp: Response) -> Result<Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Status { status, message })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str, query: &[(&str, String)]) -> Result<T, ClientError> {
        let resp = self.http.get(self.url(path)).query(query).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    async fn post<B: Serialize>(&self, path: &str, body: Option<&B>) -> Result<InputOutcome, ClientError> {
        let mut req = self.http.post(self.url(path));
        if let Some(b) = body {
            req = req.json(b);
        }
        Ok(Self::check(req.send().await?).await?.json().await?)
    }

    pub async fn plan(&self) -> Result<ExecutionStatus, ClientError> {
        self.get("/plan", &[]).await
    }

    pub async fn joints(&self) -> Result<Value, ClientError> {
        self.get("/joints", &[]).await
    }

    pub async fn markers(&self) -> Result<Value, ClientError> {
        self.get("/markers", &[]).await
    }

    pub async fn affective(&self) -> Result<AffectiveSample, ClientError> {
        self.get("/affective", &[]).await
    }

    pub async fn rewards(&self) -> Result<Value, ClientError> {
        self.get("/rewards", &[]).await
    }

    pub async fn alerts(&self, since_ms: u64) -> Result<Vec<Alert>, ClientError> {
        self.get("/alerts", &[("since", since_ms.to_string())]).await
    }

    pub async fn raw_eeg(&self, windows: usize) -> Result<Vec<EegWindow>, ClientError> {
        self.get("/raw_eeg", &[("window", windows.to_string())]).await
    }

    pub async fn control(&self, command: ControlCommand) -> Result<InputOutcome, ClientError> {
        self.post("/control", Some(&ControlRequest { command })).await
    }

    pub async fn claim(&self, block: Block) -> Result<InputOutcome, ClientError> {
        self.post("/claim", Some(&BlockRequest { block })).await
    }

    pub async fn release(&self, block: Block) -> Result<InputOutcome, ClientError> {
        self.post("/release", Some(&BlockRequest { block })).await
    }

    pub async fn affect_override(&self, metric: Metric, value: f64) -> Result<InputOutcome, ClientError> {
        self.post("/affect_override", Some(&OverrideRequest { metric, value })).await
    }

    pub async fn blink(&self) -> Result<InputOutcome, ClientError> {
        self.post::<()>("/blink", None).await
    }

    /// Opens the push stream and yields its events as they arrive.
    pub async fn stream(&self) -> Result<impl Stream<Item = Result<StreamEvent, ClientError>>, ClientError> {
        let resp = Self::check(self.http.get(self.url("/stream")).send().await?).await?;
        let chunks = resp.bytes_stream().map_err(ClientError::from);
        let lines = chunks
            .scan(Vec::<u8>::new(), |buf, chunk| {
                let out: Vec<Result<StreamEvent, ClientError>> = match chunk {
                    Err(e) => vec![Err(e)],
                    Ok(bytes) => {
                        buf.extend_from_slice(&bytes);
                        let mut events = Vec::new();
                        while let Some(pos) = buf.iter().position(|&b| b == b'\n') {
                            let line: Vec<u8> = buf.drain(..=pos).collect();
                            if line.len() > 1 {
                                events.push(serde_json::from_slice(&line).map_err(ClientError::from));
                            }
                        }
                        events
                    }
                };
                futures::future::ready(Some(futures::stream::iter(out)))
            })
            .flatten();
        Ok(lines)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls_join_prefix() {
        let c = Client::new("http://localhost:9000/");
        assert_eq!(c.url("/plan"), "http://localhost:9000/api/v1/plan");
        assert_eq!(Client::local(81).url("/blink"), "http://127.0.0.1:81/api/v1/blink");
    }
}
