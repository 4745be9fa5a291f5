use std::io::ErrorKind;
use std::time::Duration;

use serde_json::Value;

use super::{AttemptError, BackendSpec, ErrorCategory};

pub(crate) struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    headers: Vec<(String, String)>,
}

impl HttpTransport {
    pub fn new(spec: &BackendSpec) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(spec.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: spec.endpoint.clone(),
            headers: spec.headers.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn post(&self, body: &Value) -> Result<Value, AttemptError> {
        let mut request = self.agent.post(&self.endpoint);
        for (name, value) in &self.headers {
            request = request.header(name, value);
        }
        let mut response = request.send_json(body).map_err(classify)?;
        let status = response.status().as_u16();
        if status >= 400 {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            let snippet: String = text.chars().take(200).collect();
            return Err(AttemptError::new(ErrorCategory::Remote, format!("HTTP {status}: {snippet}")));
        }
        response
            .body_mut()
            .read_json::<Value>()
            .map_err(|e| match classify(e) {
                e if e.category == ErrorCategory::Timeout => e,
                e => AttemptError::new(ErrorCategory::Integrity, format!("unreadable response body: {}", e.message)),
            })
    }
}

fn classify(err: ureq::Error) -> AttemptError {
    let category = match &err {
        ureq::Error::Timeout(_) => ErrorCategory::Timeout,
        ureq::Error::Io(io) if matches!(io.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock) => {
            ErrorCategory::Timeout
        }
        ureq::Error::StatusCode(_) => ErrorCategory::Remote,
        ureq::Error::Json(_) => ErrorCategory::Integrity,
        _ => ErrorCategory::Protocol,
    };
    AttemptError::new(category, err.to_string())
}
