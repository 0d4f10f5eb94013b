//! HTTP text-exchange client for the refinement protocol.
//!
//! Wire format (documented in `docs/config.md`): POST the JSON body
//! `{"input": <prompt>}` to the configured endpoint; the service replies
//! `{"output": <text>}`. Failures after the configured retries surface as
//! exchange errors, which the refinement protocol treats as fail-open.

use std::time::Duration;

use anyhow::Result;
use serde::Deserialize;

use mrseg_core::templates::TextExchange;

pub struct HttpExchange {
    endpoint: String,
    retries: u32,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ExchangeReply {
    output: String,
}

impl HttpExchange {
    pub fn new(endpoint: String, timeout_ms: u64, retries: u32) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(timeout_ms))
            .build()?;
        Ok(Self {
            endpoint,
            retries,
            client,
        })
    }
}

impl TextExchange for HttpExchange {
    fn exchange(&self, request: &str) -> Result<String, String> {
        let mut last_error = String::new();
        for _ in 0..=self.retries {
            let sent = self
                .client
                .post(&self.endpoint)
                .json(&serde_json::json!({ "input": request }))
                .send();
            match sent.and_then(|r| r.error_for_status()) {
                Ok(response) => match response.json::<ExchangeReply>() {
                    Ok(reply) => return Ok(reply.output),
                    Err(e) => last_error = format!("bad reply body: {e}"),
                },
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(last_error)
    }
}
