//! Chat-completion client: request model, canonical cache keys, the HTTP
//! gateway with retries, an in-flight limiter and a disk cache, plus image
//! payload preparation.

mod cache;
mod client;
mod images;
mod limiter;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Result;
use crate::text::sha256_hex;

pub use cache::DiskCache;
pub use client::{Gateway, GatewayConfig, RetryConfig};
pub use images::{
    compose_grid, compose_payload_grid, decode_image, encode_png, prepare_image_parts, select_views, GridCell,
    ImageMode, ImagePart, PreparedImages,
};
pub use limiter::{InflightLimiter, Permit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Image { media_type: String, data_base64: String },
}

impl ContentPart {
    pub fn text(text: impl Into<String>) -> Self {
        ContentPart::Text { text: text.into() }
    }

    fn to_wire(&self, normalize: bool) -> Value {
        match self {
            ContentPart::Text { text } => {
                let text = if normalize {
                    normalize_whitespace(text)
                } else {
                    text.clone()
                };
                json!({ "type": "text", "text": text })
            }
            ContentPart::Image {
                media_type,
                data_base64,
            } => json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{media_type};base64,{data_base64}") }
            }),
        }
    }
}

impl From<ImagePart> for ContentPart {
    fn from(p: ImagePart) -> Self {
        ContentPart::Image {
            media_type: p.media_type,
            data_base64: p.data_base64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: vec![ContentPart::text(text)],
        }
    }

    pub fn user(content: Vec<ContentPart>) -> Self {
        ChatMessage {
            role: "user".into(),
            content,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    /// Request body in the chat-completion wire format.
    pub fn wire_body(&self) -> Value {
        self.to_value(false)
    }

    /// Wire body with whitespace-normalised text. serde_json maps are
    /// ordered, so serialising this yields sorted keys.
    pub fn canonical(&self) -> Value {
        self.to_value(true)
    }

    pub fn cache_key(&self) -> String {
        sha256_hex(self.canonical().to_string().as_bytes())
    }

    fn to_value(&self, normalize: bool) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                json!({
                    "role": m.role,
                    "content": m.content.iter().map(|p| p.to_wire(normalize)).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "model": self.model_id,
            "messages": messages,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        })
    }
}

fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Option<Usage>,
    /// Upstream attempts made for this call; 0 when served from cache.
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub cached: bool,
    /// Backoff delays slept between attempts, in milliseconds.
    #[serde(default)]
    pub backoff_ms: Vec<u64>,
}

impl ChatResponse {
    pub fn from_text(text: impl Into<String>) -> Self {
        ChatResponse {
            text: text.into(),
            usage: None,
            attempts: 1,
            cached: false,
            backoff_ms: Vec::new(),
        }
    }
}

/// Anything that answers chat requests: the HTTP gateway, a cached replay,
/// or a scripted stub.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse>;

    /// Whether the upstream answers at all.
    fn probe(&self) -> bool {
        true
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        (**self).complete(req)
    }

    fn probe(&self) -> bool {
        (**self).probe()
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        (**self).complete(req)
    }

    fn probe(&self) -> bool {
        (**self).probe()
    }
}

/// Concatenated text of every text part in a request, for stubs and logs.
pub fn request_text(req: &ChatRequest) -> String {
    req.messages
        .iter()
        .flat_map(|m| &m.content)
        .filter_map(|p| match p {
            ContentPart::Text { text } => Some(text.as_str()),
            ContentPart::Image { .. } => None,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn request() -> ChatRequest {
        ChatRequest {
            model_id: "m".into(),
            messages: vec![
                ChatMessage::system("be terse"),
                ChatMessage::user(vec![
                    ContentPart::text("look  at\nthis"),
                    ContentPart::Image {
                        media_type: "image/png".into(),
                        data_base64: "AAAA".into(),
                    },
                ]),
            ],
            max_tokens: 64,
            temperature: 0.0,
        }
    }

    #[test]
    fn wire_body_uses_data_uris() {
        let body = request().wire_body();
        assert_eq!(body["model"], "m");
        let img = &body["messages"][1]["content"][1];
        assert_eq!(img["type"], "image_url");
        assert_eq!(img["image_url"]["url"], "data:image/png;base64,AAAA");
    }

    #[test]
    fn whitespace_differences_share_a_key() {
        let a = request();
        let mut b = request();
        b.messages[1].content[0] = ContentPart::text("look at this ");
        assert_eq!(a.cache_key(), b.cache_key());
        assert_ne!(a.wire_body(), b.wire_body());
    }

    proptest! {
        // Each field mutation changes the canonical form and hence the key.
        #[test]
        fn key_tracks_canonical_form(field in 0usize..6, salt in "[a-z]{1,8}") {
            let a = request();
            let mut b = request();
            match field {
                0 => b.model_id.push_str(&salt),
                1 => b.messages[0].role.push_str(&salt),
                2 => b.messages[1].content[0] = ContentPart::text(format!("look at this {salt}")),
                3 => b.messages[1].content[1] = ContentPart::Image {
                    media_type: "image/png".into(),
                    data_base64: format!("AAAA{salt}"),
                },
                4 => b.max_tokens += salt.len() as u32,
                _ => b.temperature += salt.len() as f64 / 10.0,
            }
            prop_assert_ne!(a.canonical(), b.canonical());
            prop_assert_ne!(a.cache_key(), b.cache_key());
            prop_assert_eq!(a.cache_key(), request().cache_key());
        }
    }
}
