//! Chat-completion HTTP endpoint.
//!
//! Wire body: `{model, messages, temperature, max_tokens, n?, seed?}` with
//! media passed as url content parts. The API key is read from the
//! environment variable named in the config and never logged.

use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatEndpoint, ChatRequest, EndpointConfig, EndpointError, GateError};

pub struct HttpEndpoint {
    client: reqwest::blocking::Client,
    url: String,
    model_name: String,
    api_key: Option<String>,
    timeout_s: f64,
}

impl HttpEndpoint {
    pub fn new(config: &EndpointConfig) -> Result<Self, GateError> {
        config.validate()?;
        if config.base_url.is_empty() {
            return Err(GateError::InvalidConfig("base_url must be set for http endpoints".into()));
        }
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            match std::env::var(&config.api_key_env) {
                Ok(key) if !key.is_empty() => Some(key),
                _ => {
                    log::warn!(
                        "api key env var {} is unset; sending unauthenticated requests",
                        config.api_key_env
                    );
                    None
                }
            }
        };
        let base = config.base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| GateError::InvalidConfig(e.to_string()))?;
        Ok(HttpEndpoint {
            client,
            url,
            model_name: config.model_name.clone(),
            api_key,
            timeout_s: config.timeout_s,
        })
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let mut body = json!({
            "model": self.model_name,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if req.n > 1 {
            body["n"] = json!(req.n);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn parse_generations(value: &Value, n: usize) -> Result<Vec<String>, EndpointError> {
        let choices = value
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| EndpointError::BadResponse("missing choices array".into()))?;
        let mut generations = Vec::with_capacity(choices.len());
        for choice in choices {
            let content = choice
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| EndpointError::BadResponse("choice without message.content".into()))?;
            generations.push(content.to_string());
        }
        if generations.len() < n {
            return Err(EndpointError::BadResponse(format!(
                "requested n={n} but endpoint returned {} choices",
                generations.len()
            )));
        }
        generations.truncate(n);
        Ok(generations)
    }
}

impl ChatEndpoint for HttpEndpoint {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn records_latency(&self) -> bool {
        true
    }

    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, EndpointError> {
        let mut builder = self.client.post(&self.url).json(&self.body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                EndpointError::Timeout(self.timeout_s)
            } else {
                EndpointError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let msg = response.text().unwrap_or_default();
            let msg = msg.chars().take(200).collect();
            return Err(EndpointError::Status { status: status.as_u16(), msg });
        }
        let value: Value = response
            .json()
            .map_err(|e| EndpointError::BadResponse(e.to_string()))?;
        Self::parse_generations(&value, req.n)
    }
}
