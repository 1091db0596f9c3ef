//! Blocking JSON-over-HTTP client shared by the sidecar backend, the remote
//! victim and the external trainer hook.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ureq::Agent;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub max_batch: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://127.0.0.1:8700".into(),
            timeout_ms: 30_000,
            retries: 3,
            backoff_ms: 200,
            max_in_flight: 4,
            max_batch: 64,
        }
    }
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub(crate) struct JsonClient {
    agent: Agent,
    pub(crate) config: HttpConfig,
    permits: Permits,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient")
            .field("config", &self.config)
            .finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl JsonClient {
    pub(crate) fn new(config: HttpConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let permits = Permits::new(config.max_in_flight);
        JsonClient {
            agent,
            config,
            permits,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POST `body` as JSON and decode the JSON reply. Transport failures and
    /// 5xx replies are retried with exponential backoff; 4xx replies are not.
    pub(crate) fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp> {
        let url = self.url(path);
        let mut attempt = 0u32;
        loop {
            let outcome = {
                let _permit = self.permits.acquire();
                self.try_post(&url, body)
            };
            match outcome {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(message)) => {
                    return Err(Error::Backend {
                        message,
                        retries: attempt,
                    })
                }
                Err(Attempt::Retry(message)) => {
                    if attempt >= self.config.retries {
                        return Err(Error::Backend {
                            message,
                            retries: attempt,
                        });
                    }
                    let wait = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
            }
        }
    }

    fn try_post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        body: &Req,
    ) -> std::result::Result<Resp, Attempt> {
        let mut resp = self
            .agent
            .post(url)
            .send_json(body)
            .map_err(|e| Attempt::Retry(format!("POST {url}: {e}")))?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(Attempt::Retry(format!("POST {url}: HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(format!(
                "POST {url}: HTTP {status} {}",
                text.trim()
            )));
        }
        resp.body_mut()
            .read_json::<Resp>()
            .map_err(|e| Attempt::Fatal(format!("POST {url}: bad response body: {e}")))
    }

    pub(crate) fn healthy(&self) -> Result<()> {
        let url = self.url("/healthz");
        let mut resp = self.agent.get(&url).call().map_err(|e| Error::Backend {
            message: format!("GET {url}: {e}"),
            retries: 0,
        })?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        if status == 200 {
            Ok(())
        } else {
            Err(Error::Backend {
                message: format!("GET {url}: HTTP {status} {}", body.trim()),
                retries: 0,
            })
        }
    }
}
