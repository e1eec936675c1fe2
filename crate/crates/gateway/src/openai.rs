//! OpenAI chat-completions wire format: request bodies with inline images,
//! answer extraction, and data URLs.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use resroute_core::vlm::{DecodeParams, Usage};

pub fn mime_of(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG") {
        "image/png"
    } else if bytes.starts_with(&[0xFF, 0xD8]) {
        "image/jpeg"
    } else {
        "application/octet-stream"
    }
}

pub fn data_url(bytes: &[u8]) -> String {
    format!("data:{};base64,{}", mime_of(bytes), STANDARD.encode(bytes))
}

/// Decodes a `data:<mime>;base64,<payload>` URL.
pub fn parse_data_url(url: &str) -> Option<Vec<u8>> {
    let rest = url.strip_prefix("data:")?;
    let (meta, payload) = rest.split_once(',')?;
    if !meta.ends_with(";base64") {
        return None;
    }
    STANDARD.decode(payload.trim()).ok()
}

/// Single-turn user message: the image first, then the question.
pub fn chat_body(model: &str, image: &[u8], query: &str, decode: DecodeParams) -> Value {
    json!({
        "model": model,
        "temperature": decode.temperature,
        "max_tokens": decode.max_tokens,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "image_url", "image_url": {"url": data_url(image)}},
                {"type": "text", "text": query},
            ],
        }],
    })
}

/// First choice's text and the usage block, if the body has the expected shape.
pub fn parse_answer(body: &Value) -> Result<(String, Option<Usage>), String> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| "missing choices[0].message.content".to_string())?;
    let answer = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        other => return Err(format!("content is {other}, expected text")),
    };
    let usage = body.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok((answer, usage))
}

/// Where the image of a chat request lives.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Inline(Vec<u8>),
    Remote(String),
}

/// The image part and the text of the last user message.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatImage {
    pub message: usize,
    pub part: usize,
    pub source: ImageSource,
    pub query: String,
}

/// Finds the image in the last user message of a chat-completions body.
pub fn find_image(body: &Value) -> Result<Option<ChatImage>, String> {
    let messages = body.get("messages").and_then(Value::as_array).ok_or("body has no messages array")?;
    let Some((mi, msg)) = messages.iter().enumerate().rev().find(|(_, m)| m.get("role").and_then(Value::as_str) == Some("user"))
    else {
        return Ok(None);
    };
    let Some(parts) = msg.get("content").and_then(Value::as_array) else {
        return Ok(None);
    };
    let query =
        parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join("\n");
    for (pi, part) in parts.iter().enumerate() {
        if part.get("type").and_then(Value::as_str) != Some("image_url") {
            continue;
        }
        let url = part
            .pointer("/image_url/url")
            .and_then(Value::as_str)
            .ok_or_else(|| format!("messages[{mi}].content[{pi}] has no image_url.url"))?;
        let source = if url.starts_with("data:") {
            ImageSource::Inline(parse_data_url(url).ok_or_else(|| format!("messages[{mi}].content[{pi}]: bad data URL"))?)
        } else {
            ImageSource::Remote(url.to_owned())
        };
        return Ok(Some(ChatImage { message: mi, part: pi, source, query }));
    }
    Ok(None)
}

/// Replaces the located image part with `bytes`.
pub fn replace_image(body: &mut Value, at: &ChatImage, bytes: &[u8]) {
    if let Some(url) = body.pointer_mut(&format!("/messages/{}/content/{}/image_url/url", at.message, at.part)) {
        *url = Value::String(data_url(bytes));
    }
}

/// Minimal chat-completions response around `answer`.
pub fn completion_response(model: &str, answer: &str, usage: Option<Usage>) -> Value {
    let mut body = json!({
        "id": "chatcmpl-resroute",
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": answer},
            "finish_reason": "stop",
        }],
    });
    if let Some(u) = usage {
        body["usage"] = json!({
            "prompt_tokens": u.prompt_tokens,
            "completion_tokens": u.completion_tokens,
            "total_tokens": u.prompt_tokens + u.completion_tokens,
        });
    }
    body
}
