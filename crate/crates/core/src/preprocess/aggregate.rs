use std::collections::BTreeMap;

use super::{filter_message, Filtered, OcrBackend, PreprocessConfig, QueryBundle, RawMessage, UserKey};
use crate::error::Result;

#[derive(Debug, Clone)]
struct Pending {
    parts: Vec<String>,
    ids: Vec<String>,
    start: i64,
    last: i64,
    chars: usize,
}

impl Pending {
    fn into_bundle(self, user_key: UserKey) -> QueryBundle {
        QueryBundle {
            user_key,
            text: self.parts.join("\n"),
            window_start: self.start,
            window_end: self.last,
            source_message_ids: self.ids,
        }
    }
}

/// Packs consecutive kept messages per user key.
///
/// A pending bundle is flushed when the user has been idle for
/// `idle_flush_seconds`, when the next message would fall outside
/// `aggregation_window_seconds`, or when the packed text would exceed
/// `max_bundle_chars`.
#[derive(Debug, Clone)]
pub struct Aggregator {
    cfg: PreprocessConfig,
    pending: BTreeMap<UserKey, Pending>,
}

impl Aggregator {
    pub fn new(cfg: PreprocessConfig) -> Self {
        Aggregator {
            cfg,
            pending: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.cfg
    }

    /// Filters `msg` and, if kept, packs it. Returns the filter outcome and
    /// any bundles this arrival forced out.
    pub fn offer(&mut self, msg: &RawMessage, ocr: &dyn OcrBackend) -> Result<(Filtered, Vec<QueryBundle>)> {
        msg.validate()?;
        let outcome = filter_message(msg, &self.cfg, ocr);
        let flushed = match &outcome {
            Filtered::Keep(text) => self.push(msg.user_key()?, msg.timestamp, &msg.message_id, text),
            Filtered::Drop(_) => Vec::new(),
        };
        Ok((outcome, flushed))
    }

    /// Adds an already-filtered message text.
    pub fn push(&mut self, key: UserKey, timestamp: i64, message_id: &str, text: &str) -> Vec<QueryBundle> {
        let mut out = Vec::new();
        let text_chars = text.chars().count();
        if let Some(p) = self.pending.get(&key) {
            let idle = timestamp - p.last >= self.cfg.idle_flush_seconds;
            let out_of_window = timestamp - p.start > self.cfg.aggregation_window_seconds;
            let too_long = p.chars + 1 + text_chars > self.cfg.max_bundle_chars;
            if idle || out_of_window || too_long {
                let p = self.pending.remove(&key).unwrap();
                out.push(p.into_bundle(key.clone()));
            }
        }
        let p = self.pending.entry(key.clone()).or_insert_with(|| Pending {
            parts: Vec::new(),
            ids: Vec::new(),
            start: timestamp,
            last: timestamp,
            chars: 0,
        });
        if !p.parts.is_empty() {
            p.chars += 1;
        }
        p.parts.push(text.to_owned());
        p.ids.push(message_id.to_owned());
        p.chars += text_chars;
        p.last = timestamp;
        if p.chars >= self.cfg.max_bundle_chars {
            let p = self.pending.remove(&key).unwrap();
            out.push(p.into_bundle(key));
        }
        out
    }

    /// Flushes every user whose bundle has gone idle or outlived its window
    /// as of `now`. Output is ordered by (window_start, user_key).
    pub fn tick(&mut self, now: i64) -> Vec<QueryBundle> {
        let due: Vec<UserKey> = self
            .pending
            .iter()
            .filter(|(_, p)| {
                now - p.last >= self.cfg.idle_flush_seconds
                    || now - p.start >= self.cfg.aggregation_window_seconds
            })
            .map(|(k, _)| k.clone())
            .collect();
        let mut out: Vec<QueryBundle> = due
            .into_iter()
            .map(|k| {
                let p = self.pending.remove(&k).unwrap();
                p.into_bundle(k)
            })
            .collect();
        out.sort_by(|a, b| (a.window_start, &a.user_key).cmp(&(b.window_start, &b.user_key)));
        out
    }

    pub fn flush_all(&mut self) -> Vec<QueryBundle> {
        self.tick(i64::MAX)
    }

    pub fn pending_users(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{make_user_key, MessageKind, NoopOcr};
    use proptest::prelude::*;

    fn agg() -> Aggregator {
        Aggregator::new(PreprocessConfig::default())
    }

    #[test]
    fn two_messages_ten_seconds_apart_pack_together() {
        let mut a = agg();
        let k = make_user_key("g1", "u1").unwrap();
        assert!(a.push(k.clone(), 1000, "m1", "my training crashes").is_empty());
        assert!(a.push(k.clone(), 1010, "m2", "with CUDA out of memory").is_empty());
        assert!(a.tick(1020).is_empty());
        let out = a.tick(1010 + 18);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "my training crashes\nwith CUDA out of memory");
        assert_eq!(out[0].source_message_ids, vec!["m1", "m2"]);
        assert_eq!((out[0].window_start, out[0].window_end), (1000, 1010));
    }

    #[test]
    fn single_message_then_silence() {
        let mut a = agg();
        let k = make_user_key("g1", "u1").unwrap();
        a.push(k, 0, "m1", "how do I install mmcv?");
        let out = a.tick(120);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "how do I install mmcv?");
        assert_eq!(a.pending_users(), 0);
    }

    #[test]
    fn interleaved_users_stay_separate() {
        let mut a = agg();
        let k1 = make_user_key("g1", "alice").unwrap();
        let k2 = make_user_key("g1", "bob").unwrap();
        a.push(k1.clone(), 0, "a1", "alice part one");
        a.push(k2.clone(), 1, "b1", "bob part one!");
        a.push(k1.clone(), 2, "a2", "alice part two");
        a.push(k2.clone(), 3, "b2", "bob part two!");
        let out = a.flush_all();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].user_key, k1);
        assert_eq!(out[0].text, "alice part one\nalice part two");
        assert_eq!(out[1].user_key, k2);
        assert_eq!(out[1].source_message_ids, vec!["b1", "b2"]);
    }

    #[test]
    fn idle_gap_splits_on_arrival() {
        let mut a = agg();
        let k = make_user_key("g", "u").unwrap();
        a.push(k.clone(), 0, "m1", "first question here");
        let out = a.push(k.clone(), 18, "m2", "unrelated later message");
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].source_message_ids, vec!["m1"]);
    }

    #[test]
    fn window_cap_splits_steady_stream() {
        let mut a = agg();
        let k = make_user_key("g", "u").unwrap();
        let mut flushed = Vec::new();
        for i in 0..20 {
            flushed.extend(a.push(k.clone(), i * 10, &format!("m{i}"), "still typing..."));
        }
        flushed.extend(a.flush_all());
        assert!(flushed.len() >= 2);
        for b in &flushed {
            assert!(b.window_end - b.window_start <= 120);
        }
    }

    #[test]
    fn char_cap_flushes() {
        let cfg = PreprocessConfig {
            max_bundle_chars: 20,
            ..PreprocessConfig::default()
        };
        let mut a = Aggregator::new(cfg);
        let k = make_user_key("g", "u").unwrap();
        assert!(a.push(k.clone(), 0, "m1", "0123456789").is_empty());
        let out = a.push(k.clone(), 1, "m2", "abcdefghijk");
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "0123456789");
        // a single oversized message goes out alone, immediately
        let out = a.push(k, 2, "m3", &"z".repeat(30));
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn offer_filters_before_packing() {
        let mut a = agg();
        let mut emoji = RawMessage::text("g", "u", 0, "e1", "");
        emoji.kind = MessageKind::Emoji;
        let (outcome, out) = a.offer(&emoji, &NoopOcr).unwrap();
        assert!(matches!(outcome, Filtered::Drop(_)));
        assert!(out.is_empty());
        assert_eq!(a.pending_users(), 0);
        let (outcome, _) = a
            .offer(&RawMessage::text("g", "u", 0, "t1", "how to export onnx"), &NoopOcr)
            .unwrap();
        assert!(matches!(outcome, Filtered::Keep(_)));
        assert_eq!(a.pending_users(), 1);
    }

    fn arb_message() -> impl Strategy<Value = (u8, u8, i64, String)> {
        (
            0u8..3,
            0u8..5,
            0i64..40,
            prop_oneof![Just(String::from("ok")), "[a-z ]{0,30}", Just(String::from("emoji"))],
        )
    }

    proptest! {
        #[test]
        fn bundles_partition_kept_messages(msgs in prop::collection::vec(arb_message(), 0..60)) {
            let cfg = PreprocessConfig { max_bundle_chars: 80, ..PreprocessConfig::default() };
            let mut a = Aggregator::new(cfg.clone());
            let mut clock = 0i64;
            let mut kept = std::collections::HashMap::new();
            let mut dropped = std::collections::HashSet::new();
            let mut bundles = Vec::new();
            for (i, (user, group, gap, text)) in msgs.into_iter().enumerate() {
                clock += gap;
                let mut m = RawMessage::text(&format!("g{group}"), &format!("u{user}"), clock, &format!("m{i}"), &text);
                if text == "emoji" { m.kind = MessageKind::Emoji; m.content.clear(); }
                let (outcome, out) = a.offer(&m, &NoopOcr).unwrap();
                match outcome {
                    Filtered::Keep(t) => { kept.insert(m.message_id.clone(), (m.user_key().unwrap(), t)); }
                    Filtered::Drop(_) => { dropped.insert(m.message_id.clone()); }
                }
                bundles.extend(out);
                bundles.extend(a.tick(clock));
            }
            bundles.extend(a.flush_all());
            let mut seen = 0;
            for b in &bundles {
                let texts: Vec<&str> = b.source_message_ids.iter().map(|id| {
                    prop_assert!(!dropped.contains(id));
                    let (key, t) = &kept[id];
                    prop_assert_eq!(key, &b.user_key);
                    Ok(t.as_str())
                }).collect::<Result<_, _>>()?;
                prop_assert_eq!(texts.join("\n"), b.text.clone());
                prop_assert!(b.window_end - b.window_start <= cfg.aggregation_window_seconds);
                prop_assert!(b.text.trim().chars().count() >= cfg.min_query_chars);
                seen += b.source_message_ids.len();
            }
            prop_assert_eq!(seen, kept.len());
        }
    }
}
