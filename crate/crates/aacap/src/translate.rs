//! HTTP translation client: POSTs a JSON `TranslationRequest` and expects a
//! JSON `TranslationResponse`.

use std::time::Duration;

use aacap_core::augment::{StubTranslator, TranslationRequest, TranslationResponse, Translator};
use aacap_core::Error;

use crate::config::{AugmentConfig, ClientKind};
use crate::error::{CliError, CliResult};

pub struct HttpTranslator {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
}

impl HttpTranslator {
    pub fn new(endpoint: &str, token: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { agent, endpoint: endpoint.to_string(), token }
    }
}

impl Translator for HttpTranslator {
    fn translate(&self, request: &TranslationRequest) -> aacap_core::Result<TranslationResponse> {
        let fail = |m: String| Error::Translation { attempts: 1, message: m };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(request).map_err(|e| fail(e.to_string()))?;
        resp.body_mut().read_json::<TranslationResponse>().map_err(|e| fail(e.to_string()))
    }
}

/// The configured client; the token is read from the environment variable named in the config.
pub fn client_from_config(cfg: &AugmentConfig, seed: u64) -> CliResult<Box<dyn Translator>> {
    match cfg.client {
        ClientKind::Stub => Ok(Box::new(StubTranslator::new(seed))),
        ClientKind::Http => {
            let endpoint = cfg
                .endpoint
                .as_deref()
                .ok_or_else(|| CliError::config("augment", "http client needs an endpoint"))?;
            let token = std::env::var(&cfg.token_env).ok();
            Ok(Box::new(HttpTranslator::new(endpoint, token, Duration::from_secs(cfg.timeout_secs))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one request, echoing the text upper-cased, and returns the raw request head.
    fn one_shot_server() -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/translate", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: TranslationRequest = serde_json::from_slice(&body).unwrap();
            let out = serde_json::to_string(&TranslationResponse { text: req.text.to_uppercase() }).unwrap();
            let mut s = stream;
            write!(s, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}", out.len()).unwrap();
            head
        });
        (url, handle)
    }

    #[test]
    fn posts_json_with_bearer_token() {
        let (url, server) = one_shot_server();
        let client = HttpTranslator::new(&url, Some("secret".into()), Duration::from_secs(5));
        let req = TranslationRequest { text: "a dog".into(), source_lang: "en".into(), target_lang: "zh".into() };
        assert_eq!(client.translate(&req).unwrap().text, "A DOG");
        let head = server.join().unwrap();
        assert!(head.starts_with("POST /translate"));
        assert!(head.contains("Bearer secret"));
    }

    #[test]
    fn unreachable_endpoint_is_a_translation_error() {
        let client = HttpTranslator::new("http://127.0.0.1:9/x", None, Duration::from_millis(300));
        let req = TranslationRequest { text: "a".into(), source_lang: "en".into(), target_lang: "zh".into() };
        assert!(matches!(client.translate(&req), Err(Error::Translation { .. })));
    }
}
