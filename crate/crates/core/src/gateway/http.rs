//! OpenAI-compatible `/chat/completions` and `/embeddings` clients.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::{
    estimate_tokens, ChatProvider, Completion, EmbeddingProvider, Message, ProviderError,
    ProviderRequest,
};

fn endpoint(base_url: &str, path: &str) -> String {
    format!("{}/{}", base_url.trim_end_matches('/'), path)
}

fn classify_status(status: StatusCode, body: String) -> ProviderError {
    let msg = format!("HTTP {status}: {}", body.chars().take(400).collect::<String>());
    if status == StatusCode::TOO_MANY_REQUESTS
        || status == StatusCode::REQUEST_TIMEOUT
        || status.is_server_error()
    {
        ProviderError::Transport(msg)
    } else {
        ProviderError::Rejected(msg)
    }
}

fn transport(e: reqwest::Error) -> ProviderError {
    ProviderError::Transport(e.to_string())
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Chat client for one base URL. The API key, when present, is sent as a bearer token.
pub struct HttpChatProvider {
    client: Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpChatProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .build()
            .map_err(|e| ProviderError::Rejected(e.to_string()))?;
        Ok(Self {
            client,
            base_url: base_url.into(),
            api_key,
        })
    }
}

impl ChatProvider for HttpChatProvider {
    fn complete(&self, request: &ProviderRequest<'_>) -> Result<Completion, ProviderError> {
        let body = json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": request.messages,
        });
        let mut req = self
            .client
            .post(endpoint(&self.base_url, "chat/completions"))
            .timeout(request.timeout)
            .json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(classify_status(status, resp.text().unwrap_or_default()));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| ProviderError::Transport(format!("malformed chat response: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Transport("chat response has no content".into()))?;
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (
                request
                    .messages
                    .iter()
                    .map(|m: &Message| estimate_tokens(&m.content))
                    .sum(),
                estimate_tokens(&text),
            ),
        };
        Ok(Completion {
            text,
            prompt_tokens,
            completion_tokens,
        })
    }
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

pub struct HttpEmbedder {
    client: Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    timeout: Duration,
}

impl HttpEmbedder {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dim: usize,
        timeout: Duration,
    ) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .build()
            .map_err(|e| ProviderError::Rejected(e.to_string()))?;
        Ok(Self {
            client,
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            dim,
            timeout,
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut req = self
            .client
            .post(endpoint(&self.base_url, "embeddings"))
            .timeout(self.timeout)
            .json(&json!({ "model": self.model, "input": text }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(classify_status(status, resp.text().unwrap_or_default()));
        }
        let parsed: EmbeddingResponse = resp
            .json()
            .map_err(|e| ProviderError::Transport(format!("malformed embedding response: {e}")))?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| ProviderError::Transport("embedding response has no data".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Task;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serve `responses` in order on a loopback port, one connection each, and
    /// hand back every request body received.
    fn fake_server(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; content_length];
                reader.read_exact(&mut buf).unwrap();
                tx.send(String::from_utf8(buf).unwrap()).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    #[test]
    fn chat_round_trip_over_loopback() {
        let (base, rx) = fake_server(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"hi there"}}],"usage":{"prompt_tokens":11,"completion_tokens":2}}"#.into(),
        )]);
        let p = HttpChatProvider::new(base, Some("k".into())).unwrap();
        let msgs = [Message::system("s"), Message::user("u")];
        let out = p
            .complete(&ProviderRequest {
                task: Task::Summarize,
                model: "m1",
                temperature: 0.1,
                timeout: Duration::from_secs(5),
                messages: &msgs,
            })
            .unwrap();
        assert_eq!(out.text, "hi there");
        assert_eq!(out.prompt_tokens, 11);
        let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["model"], "m1");
        assert_eq!(sent["messages"][1]["role"], "user");
    }

    #[test]
    fn server_errors_are_transport_client_errors_are_rejections() {
        let (base, _rx) = fake_server(vec![
            (503, "{}".into()),
            (400, r#"{"error":"bad"}"#.into()),
        ]);
        let p = HttpChatProvider::new(base, None).unwrap();
        let msgs = [Message::user("u")];
        let req = ProviderRequest {
            task: Task::Propose,
            model: "m",
            temperature: 0.5,
            timeout: Duration::from_secs(5),
            messages: &msgs,
        };
        assert!(matches!(p.complete(&req), Err(ProviderError::Transport(_))));
        assert!(matches!(p.complete(&req), Err(ProviderError::Rejected(_))));
    }

    #[test]
    fn embeddings_round_trip() {
        let (base, rx) = fake_server(vec![(200, r#"{"data":[{"embedding":[3.0,4.0]}]}"#.into())]);
        let e = HttpEmbedder::new(base, "emb", None, 2, Duration::from_secs(5)).unwrap();
        assert_eq!(e.embed_raw("text").unwrap(), vec![3.0, 4.0]);
        let sent: serde_json::Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["input"], "text");
    }
}
