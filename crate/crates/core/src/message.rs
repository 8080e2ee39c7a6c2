//! Message data model and its canonical wire text form.
//!
//! Every interaction between components is a [`Message`]: a typed,
//! timestamped, profile-addressed document with an opaque content map and
//! an optional QoS annotation. The wire form is a single XML document:
//!
//! ```text
//! <EtherMsg type="..." rel="...">
//!   <profile name="..."/>
//!   <content>...</content>
//!   <ts value="..."/>
//!   <QoS crit="..." period="..." deadline="..." wcet="..."/>
//! </EtherMsg>
//! ```
//!
//! The canonical form is fixed: attribute order exactly as above, UTF-8,
//! no insignificant whitespace, empty elements self-closed, and absent QoS
//! attributes omitted rather than written as sentinels. [`serialize`] is a
//! pure function, so equal messages produce byte-identical text and golden
//! tests can compare bytes. [`parse`] accepts any equivalent document
//! (whitespace between elements, `<x></x>` for `<x/>`) and preserves
//! unknown root-level child elements verbatim for forward compatibility;
//! re-serialization emits them back at root level after the known children.
//!
//! Messages are immutable once built, which is what makes them safe to
//! hand across dispatchers and nodes; all invariants are enforced by the
//! constructor, so serialization itself cannot fail.

use indexmap::IndexMap;
use std::fmt;

/// Delivery contract requested by the sender.
///
/// `BestEffort` is fire-and-forget; `Reliable` makes the network messenger
/// retransmit until the receiving node acknowledges the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reliability {
    BestEffort,
    Reliable,
}

impl Reliability {
    pub fn as_token(self) -> &'static str {
        match self {
            Reliability::BestEffort => "best_effort",
            Reliability::Reliable => "reliable",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "best_effort" => Some(Reliability::BestEffort),
            "reliable" => Some(Reliability::Reliable),
            _ => None,
        }
    }
}

/// Scheduling-relevant attributes of a message.
///
/// All fields are optional; an absent field is omitted from the wire form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QosSpec {
    /// Importance of the message (non-negative; larger = more important).
    pub crit: Option<u64>,
    /// Period of the emitting task, milliseconds.
    pub period_ms: Option<u64>,
    /// Relative deadline, milliseconds.
    pub deadline_ms: Option<u64>,
    /// Worst-case execution time, milliseconds.
    pub wcet_ms: Option<u64>,
}

impl QosSpec {
    pub fn validate(&self) -> Result<(), MessageError> {
        for (name, v) in [
            ("QoS@period", self.period_ms),
            ("QoS@deadline", self.deadline_ms),
            ("QoS@wcet", self.wcet_ms),
        ] {
            if v == Some(0) {
                return Err(MessageError::InvalidField {
                    field: name,
                    reason: "must be positive".into(),
                });
            }
        }
        if let (Some(w), Some(d)) = (self.wcet_ms, self.deadline_ms) {
            if w > d {
                return Err(MessageError::InvalidField {
                    field: "QoS@wcet",
                    reason: format!("wcet {w} exceeds deadline {d}"),
                });
            }
        }
        Ok(())
    }

    pub fn periodic(period_ms: u64) -> Self {
        QosSpec { period_ms: Some(period_ms), ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.crit.is_none()
            && self.period_ms.is_none()
            && self.deadline_ms.is_none()
            && self.wcet_ms.is_none()
    }
}

/// A content value: scalar text, a nested map, or a verbatim XML fragment
/// preserved from an unknown element during parsing.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Map(Content),
    /// Raw XML of an unrecognized root-level child, kept so that documents
    /// from newer peers survive a parse/serialize round through this node.
    Raw(String),
}

impl Value {
    pub fn text(s: impl Into<String>) -> Value {
        Value::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&Content> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Parses the value as an f64, the common case for control payloads.
    pub fn as_f64(&self) -> Option<f64> {
        self.as_text().and_then(|s| s.parse().ok())
    }

    pub fn as_u64(&self) -> Option<u64> {
        self.as_text().and_then(|s| s.parse().ok())
    }
}

/// Ordered string-keyed map carried in the `content` element.
///
/// The kernel never interprets it; it exists purely for the interaction
/// semantics of the communicating components. Keys must be XML-name-safe
/// because they become element names on the wire.
#[derive(Debug, Clone, Default)]
pub struct Content {
    entries: IndexMap<String, Value>,
}

impl PartialEq for Content {
    // Order-sensitive: the wire form is ordered, so equality must be too.
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|(a, b)| a == b)
    }
}

impl Content {
    pub fn new() -> Self {
        Content::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(Value::as_text)
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Value::as_f64)
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.get(key).and_then(Value::as_u64)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.entries.iter()
    }

    /// Inserts an entry, validating the key and value.
    pub fn set(&mut self, key: impl Into<String>, value: Value) -> Result<(), MessageError> {
        let key = key.into();
        validate_xml_name(&key)?;
        validate_value(&value)?;
        self.entries.insert(key, value);
        Ok(())
    }

    pub fn with(mut self, key: impl Into<String>, value: Value) -> Result<Self, MessageError> {
        self.set(key, value)?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), MessageError> {
        for (k, v) in &self.entries {
            validate_xml_name(k)?;
            validate_value(v)?;
        }
        Ok(())
    }
}

/// Builds a content map from `(key, value)` pairs, panicking on invalid
/// keys. Intended for literal construction in components and tests.
#[macro_export]
macro_rules! content {
    ($($k:expr => $v:expr),* $(,)?) => {{
        let mut c = $crate::message::Content::new();
        $(c.set($k, $crate::message::Value::text($v.to_string())).expect("valid content key");)*
        c
    }};
}

fn validate_xml_name(name: &str) -> Result<(), MessageError> {
    let mut chars = name.chars();
    let ok_first = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_');
    let ok_rest = chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if !ok_first || !ok_rest {
        return Err(MessageError::InvalidField {
            field: "content key",
            reason: format!("{name:?} is not a valid element name"),
        });
    }
    Ok(())
}

fn validate_text(field: &'static str, s: &str) -> Result<(), MessageError> {
    if s.chars().any(|c| c < ' ' && c != '\t' && c != '\n' && c != '\r') {
        return Err(MessageError::InvalidField {
            field,
            reason: "contains control characters not representable in XML".into(),
        });
    }
    Ok(())
}

fn validate_value(v: &Value) -> Result<(), MessageError> {
    match v {
        Value::Text(s) => validate_text("content value", s),
        Value::Map(m) => {
            if m.is_empty() {
                // An empty map would serialize identically to empty text and
                // not round-trip; canonical form forbids it.
                return Err(MessageError::InvalidField {
                    field: "content value",
                    reason: "empty nested maps are not canonical".into(),
                });
            }
            m.validate()
        }
        Value::Raw(_) => Ok(()),
    }
}

/// A QoS-annotated, timestamped, profile-addressed unit of component
/// interaction. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    msg_type: String,
    reliability: Reliability,
    profile: String,
    content: Content,
    timestamp_ms: u64,
    qos: Option<QosSpec>,
}

impl Message {
    pub fn new(
        msg_type: impl Into<String>,
        reliability: Reliability,
        profile: impl Into<String>,
        content: Content,
        timestamp_ms: u64,
        qos: Option<QosSpec>,
    ) -> Result<Self, MessageError> {
        let msg_type = msg_type.into();
        let profile = profile.into();
        if msg_type.is_empty() {
            return Err(MessageError::InvalidField {
                field: "type",
                reason: "must be non-empty".into(),
            });
        }
        if profile.is_empty() {
            return Err(MessageError::InvalidField {
                field: "profile",
                reason: "must be non-empty".into(),
            });
        }
        validate_text("type", &msg_type)?;
        validate_text("profile", &profile)?;
        content.validate()?;
        if let Some(q) = &qos {
            q.validate()?;
        }
        Ok(Message { msg_type, reliability, profile, content, timestamp_ms, qos })
    }

    pub fn msg_type(&self) -> &str {
        &self.msg_type
    }

    pub fn reliability(&self) -> Reliability {
        self.reliability
    }

    pub fn profile(&self) -> &str {
        &self.profile
    }

    pub fn content(&self) -> &Content {
        &self.content
    }

    pub fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }

    pub fn qos(&self) -> Option<&QosSpec> {
        self.qos.as_ref()
    }

    /// Same message with the timestamp replaced (used by the receive path
    /// when translating a remote timestamp into the local clock).
    pub fn with_timestamp(&self, timestamp_ms: u64) -> Message {
        let mut m = self.clone();
        m.timestamp_ms = timestamp_ms;
        m
    }

    /// Same message re-addressed to a different profile.
    pub fn with_profile(&self, profile: impl Into<String>) -> Result<Message, MessageError> {
        Message::new(
            self.msg_type.clone(),
            self.reliability,
            profile,
            self.content.clone(),
            self.timestamp_ms,
            self.qos,
        )
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MessageError {
    #[error("invalid {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },
}

fn parse_err(location: impl Into<String>, reason: impl Into<String>) -> MessageError {
    MessageError::Parse { location: location.into(), reason: reason.into() }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn escape_into(out: &mut String, s: &str, quote: bool) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' if quote => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
}

fn write_entries(out: &mut String, content: &Content) {
    for (key, value) in content.iter() {
        match value {
            Value::Text(s) if s.is_empty() => {
                out.push('<');
                out.push_str(key);
                out.push_str("/>");
            }
            Value::Text(s) => {
                out.push('<');
                out.push_str(key);
                out.push('>');
                escape_into(out, s, false);
                out.push_str("</");
                out.push_str(key);
                out.push('>');
            }
            Value::Map(m) => {
                out.push('<');
                out.push_str(key);
                out.push('>');
                write_entries(out, m);
                out.push_str("</");
                out.push_str(key);
                out.push('>');
            }
            Value::Raw(_) => {} // emitted at root level
        }
    }
}

/// Emits the canonical wire text of a message.
pub fn serialize(m: &Message) -> String {
    let mut out = String::with_capacity(128);
    out.push_str("<EtherMsg type=\"");
    escape_into(&mut out, &m.msg_type, true);
    out.push_str("\" rel=\"");
    out.push_str(m.reliability.as_token());
    out.push_str("\"><profile name=\"");
    escape_into(&mut out, &m.profile, true);
    out.push_str("\"/>");
    let has_plain = m.content.iter().any(|(_, v)| !matches!(v, Value::Raw(_)));
    if has_plain {
        out.push_str("<content>");
        write_entries(&mut out, &m.content);
        out.push_str("</content>");
    } else {
        out.push_str("<content/>");
    }
    out.push_str("<ts value=\"");
    out.push_str(&m.timestamp_ms.to_string());
    out.push_str("\"/>");
    if let Some(q) = &m.qos {
        out.push_str("<QoS");
        for (name, v) in [
            ("crit", q.crit),
            ("period", q.period_ms),
            ("deadline", q.deadline_ms),
            ("wcet", q.wcet_ms),
        ] {
            if let Some(v) = v {
                out.push(' ');
                out.push_str(name);
                out.push_str("=\"");
                out.push_str(&v.to_string());
                out.push('"');
            }
        }
        out.push_str("/>");
    }
    for (_, v) in m.content.iter() {
        if let Value::Raw(raw) = v {
            out.push_str(raw);
        }
    }
    out.push_str("</EtherMsg>");
    out
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

struct Elem {
    name: String,
    attrs: Vec<(String, String)>,
    children: Vec<Elem>,
    text: String,
    has_child_elems: bool,
    span: (usize, usize),
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Cursor { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn eof(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn eat(&mut self, tok: &str) -> bool {
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &str, loc: &str) -> Result<(), MessageError> {
        if self.eat(tok) {
            Ok(())
        } else {
            Err(parse_err(
                format!("{loc} at byte {}", self.pos),
                format!("expected {tok:?}"),
            ))
        }
    }

    fn read_name(&mut self, loc: &str) -> Result<String, MessageError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':')) {
            self.bump();
        }
        if self.pos == start {
            return Err(parse_err(format!("{loc} at byte {start}"), "expected a name"));
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn read_entity(&mut self, loc: &str) -> Result<char, MessageError> {
        let start = self.pos;
        // positioned just after '&'
        let semi = self.rest().find(';').ok_or_else(|| {
            parse_err(format!("{loc} at byte {start}"), "unterminated entity")
        })?;
        let ent = &self.rest()[..semi];
        let c = match ent {
            "amp" => '&',
            "lt" => '<',
            "gt" => '>',
            "quot" => '"',
            "apos" => '\'',
            _ if ent.starts_with("#x") || ent.starts_with("#X") => {
                u32::from_str_radix(&ent[2..], 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| parse_err(format!("{loc} at byte {start}"), "bad character reference"))?
            }
            _ if ent.starts_with('#') => ent[1..]
                .parse::<u32>()
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| parse_err(format!("{loc} at byte {start}"), "bad character reference"))?,
            _ => {
                return Err(parse_err(
                    format!("{loc} at byte {start}"),
                    format!("unknown entity &{ent};"),
                ))
            }
        };
        self.pos += semi + 1;
        Ok(c)
    }

    fn read_attr_value(&mut self, loc: &str) -> Result<String, MessageError> {
        self.expect("\"", loc)?;
        let mut out = String::new();
        loop {
            match self.peek() {
                None => return Err(parse_err(loc, "unterminated attribute value")),
                Some('"') => {
                    self.bump();
                    return Ok(out);
                }
                Some('&') => {
                    self.bump();
                    out.push(self.read_entity(loc)?);
                }
                Some('<') => return Err(parse_err(loc, "'<' inside attribute value")),
                Some(c) => {
                    self.bump();
                    out.push(c);
                }
            }
        }
    }

    fn read_element(&mut self) -> Result<Elem, MessageError> {
        let span_start = self.pos;
        self.expect("<", "document")?;
        let name = self.read_name("element")?;
        let loc = format!("element {name}");
        let mut attrs = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some('/') => {
                    self.bump();
                    self.expect(">", &loc)?;
                    return Ok(Elem {
                        name,
                        attrs,
                        children: Vec::new(),
                        text: String::new(),
                        has_child_elems: false,
                        span: (span_start, self.pos),
                    });
                }
                Some('>') => {
                    self.bump();
                    break;
                }
                Some(_) => {
                    let aname = self.read_name(&loc)?;
                    self.skip_ws();
                    self.expect("=", &format!("{loc}@{aname}"))?;
                    self.skip_ws();
                    let v = self.read_attr_value(&format!("{loc}@{aname}"))?;
                    attrs.push((aname, v));
                }
                None => return Err(parse_err(&loc, "unterminated start tag")),
            }
        }
        // Body: text and/or child elements until the matching end tag.
        let mut children = Vec::new();
        let mut text = String::new();
        let mut has_child_elems = false;
        loop {
            match self.peek() {
                None => return Err(parse_err(&loc, "missing end tag")),
                Some('<') => {
                    if self.rest().starts_with("</") {
                        self.pos += 2;
                        let end = self.read_name(&loc)?;
                        if end != name {
                            return Err(parse_err(
                                &loc,
                                format!("mismatched end tag </{end}>"),
                            ));
                        }
                        self.skip_ws();
                        self.expect(">", &loc)?;
                        return Ok(Elem {
                            name,
                            attrs,
                            children,
                            text,
                            has_child_elems,
                            span: (span_start, self.pos),
                        });
                    }
                    has_child_elems = true;
                    children.push(self.read_element()?);
                }
                Some('&') => {
                    self.bump();
                    text.push(self.read_entity(&loc)?);
                }
                Some(c) => {
                    self.bump();
                    text.push(c);
                }
            }
        }
    }
}

fn elem_to_content(e: &Elem, path: &str) -> Result<Content, MessageError> {
    let mut map = Content::new();
    for child in &e.children {
        let cpath = format!("{path}/{}", child.name);
        if !child.attrs.is_empty() {
            return Err(parse_err(cpath, "attributes are not allowed inside content"));
        }
        let value = if child.has_child_elems {
            if !child.text.trim().is_empty() {
                return Err(parse_err(cpath, "mixed text and elements"));
            }
            Value::Map(elem_to_content(child, &cpath)?)
        } else {
            Value::Text(child.text.clone())
        };
        map.entries.insert(child.name.clone(), value);
    }
    Ok(map)
}

fn attr<'e>(e: &'e Elem, name: &str) -> Option<&'e str> {
    e.attrs.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
}

fn numeric_attr(e: &Elem, name: &str, path: &str) -> Result<Option<u64>, MessageError> {
    match attr(e, name) {
        None => Ok(None),
        Some(v) => v.parse::<u64>().map(Some).map_err(|_| {
            parse_err(format!("{path}@{name}"), format!("non-numeric value {v:?}"))
        }),
    }
}

/// Parses a wire-text document back into a [`Message`].
pub fn parse(text: &str) -> Result<Message, MessageError> {
    let mut cur = Cursor::new(text);
    cur.skip_ws();
    if cur.rest().starts_with("<?") {
        match cur.rest().find("?>") {
            Some(i) => cur.pos += i + 2,
            None => return Err(parse_err("document", "unterminated XML declaration")),
        }
        cur.skip_ws();
    }
    if cur.eof() {
        return Err(parse_err("document", "missing root element"));
    }
    let root = cur.read_element()?;
    cur.skip_ws();
    if !cur.eof() {
        return Err(parse_err(
            format!("document at byte {}", cur.pos),
            "trailing data after root element",
        ));
    }
    if root.name != "EtherMsg" {
        return Err(parse_err("document", format!("root element is <{}>, expected <EtherMsg>", root.name)));
    }
    if !root.text.trim().is_empty() {
        return Err(parse_err("EtherMsg", "unexpected text at root level"));
    }

    let msg_type = attr(&root, "type")
        .ok_or_else(|| parse_err("EtherMsg@type", "missing type attribute"))?
        .to_string();
    let rel = match attr(&root, "rel") {
        None => Reliability::BestEffort,
        Some(v) => Reliability::from_token(v)
            .ok_or_else(|| parse_err("EtherMsg@rel", format!("unknown reliability {v:?}")))?,
    };

    let mut profile = None;
    let mut content = None;
    let mut ts = None;
    let mut qos = None;
    let mut raws: Vec<(String, String)> = Vec::new();
    for child in &root.children {
        match child.name.as_str() {
            "profile" => {
                profile = Some(
                    attr(child, "name")
                        .ok_or_else(|| parse_err("EtherMsg/profile@name", "missing name attribute"))?
                        .to_string(),
                );
            }
            "content" => {
                content = Some(elem_to_content(child, "EtherMsg/content")?);
            }
            "ts" => {
                let v = attr(child, "value")
                    .ok_or_else(|| parse_err("EtherMsg/ts@value", "missing value attribute"))?;
                ts = Some(v.parse::<u64>().map_err(|_| {
                    parse_err("EtherMsg/ts@value", format!("non-numeric value {v:?}"))
                })?);
            }
            "QoS" => {
                qos = Some(QosSpec {
                    crit: numeric_attr(child, "crit", "EtherMsg/QoS")?,
                    period_ms: numeric_attr(child, "period", "EtherMsg/QoS")?,
                    deadline_ms: numeric_attr(child, "deadline", "EtherMsg/QoS")?,
                    wcet_ms: numeric_attr(child, "wcet", "EtherMsg/QoS")?,
                });
            }
            other => {
                raws.push((other.to_string(), text[child.span.0..child.span.1].to_string()));
            }
        }
    }

    let profile = profile.ok_or_else(|| parse_err("EtherMsg", "missing profile element"))?;
    let ts = ts.ok_or_else(|| parse_err("EtherMsg", "missing ts element"))?;
    let mut content = content.unwrap_or_default();
    for (name, raw) in raws {
        match content.entries.get_mut(&name) {
            // Two unknown siblings with one name: keep both fragments under
            // the single key so nothing is dropped.
            Some(Value::Raw(existing)) => existing.push_str(&raw),
            _ => {
                content.entries.insert(name, Value::Raw(raw));
            }
        }
    }

    Message::new(msg_type, rel, profile, content, ts, qos)
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize(self))
    }
}
