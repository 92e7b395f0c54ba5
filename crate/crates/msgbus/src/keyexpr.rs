//! Key expressions: `/`-separated tokens with `*` (one segment) and `**`
//! (zero or more segments) wildcards, plus remap rules built on top of them.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyExprError {
    #[error("empty key expression")]
    Empty,
    #[error("key expression `{expr}`: empty segment at position {index}")]
    EmptySegment { expr: String, index: usize },
    #[error("key expression `{expr}`: segment `{segment}` mixes literal characters with `*`")]
    MixedWildcard { expr: String, segment: String },
    #[error("key expression `{expr}`: `**` may appear at most once (segment {index})")]
    RepeatedDoubleStar { expr: String, index: usize },
    #[error("key `{expr}`: wildcard segment `{segment}` not allowed in a literal key")]
    NotLiteral { expr: String, segment: String },
    #[error("remap `{external}` -> `{internal}`: {reason}")]
    RemapMismatch {
        external: String,
        internal: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Segment {
    Literal(String),
    /// Exactly one segment.
    Star,
    /// Zero or more segments.
    DoubleStar,
}

impl Segment {
    pub fn is_wildcard(&self) -> bool {
        !matches!(self, Segment::Literal(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyExpr {
    text: String,
    segments: Vec<Segment>,
}

impl KeyExpr {
    pub fn parse(expr: &str) -> Result<Self, KeyExprError> {
        if expr.is_empty() {
            return Err(KeyExprError::Empty);
        }
        let mut segments = Vec::new();
        let mut seen_double = false;
        for (index, token) in expr.split('/').enumerate() {
            let seg = match token {
                "" => {
                    return Err(KeyExprError::EmptySegment {
                        expr: expr.to_string(),
                        index,
                    })
                }
                "*" => Segment::Star,
                "**" => {
                    if seen_double {
                        return Err(KeyExprError::RepeatedDoubleStar {
                            expr: expr.to_string(),
                            index,
                        });
                    }
                    seen_double = true;
                    Segment::DoubleStar
                }
                t if t.contains('*') => {
                    return Err(KeyExprError::MixedWildcard {
                        expr: expr.to_string(),
                        segment: t.to_string(),
                    })
                }
                t => Segment::Literal(t.to_string()),
            };
            segments.push(seg);
        }
        Ok(Self {
            text: expr.to_string(),
            segments,
        })
    }

    /// Parses a concrete key: a valid expression without wildcards.
    pub fn parse_literal(key: &str) -> Result<Self, KeyExprError> {
        let expr = Self::parse(key)?;
        if let Some(seg) = expr.segments.iter().find(|s| s.is_wildcard()) {
            return Err(KeyExprError::NotLiteral {
                expr: key.to_string(),
                segment: match seg {
                    Segment::Star => "*".into(),
                    _ => "**".into(),
                },
            });
        }
        Ok(expr)
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_literal(&self) -> bool {
        self.segments.iter().all(|s| !s.is_wildcard())
    }

    pub fn wildcard_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_wildcard()).count()
    }

    /// True iff `key` is in the language of this pattern. Wildcards in `key`
    /// are compared as plain tokens, so callers should pass literal keys.
    pub fn matches(&self, key: &KeyExpr) -> bool {
        self.captures(key).is_some()
    }

    /// Matches `key` and returns, for each wildcard in pattern order, the
    /// key segments it consumed.
    pub fn captures<'k>(&self, key: &'k KeyExpr) -> Option<Vec<Vec<&'k str>>> {
        let key_tokens: Vec<&str> = key.text.split('/').collect();
        let pat = &self.segments;
        let double = pat.iter().position(|s| *s == Segment::DoubleStar);

        let match_fixed = |pats: &[Segment], toks: &[&'k str], out: &mut Vec<Vec<&'k str>>| {
            for (p, t) in pats.iter().zip(toks) {
                match p {
                    Segment::Literal(l) if l == t => {}
                    Segment::Literal(_) => return false,
                    Segment::Star => out.push(vec![*t]),
                    Segment::DoubleStar => unreachable!(),
                }
            }
            true
        };

        let mut caps = Vec::with_capacity(self.wildcard_count());
        match double {
            None => {
                if pat.len() != key_tokens.len() || !match_fixed(pat, &key_tokens, &mut caps) {
                    return None;
                }
            }
            Some(i) => {
                let suffix = &pat[i + 1..];
                if key_tokens.len() < i + suffix.len() {
                    return None;
                }
                let tail_start = key_tokens.len() - suffix.len();
                if !match_fixed(&pat[..i], &key_tokens[..i], &mut caps) {
                    return None;
                }
                caps.push(key_tokens[i..tail_start].to_vec());
                if !match_fixed(suffix, &key_tokens[tail_start..], &mut caps) {
                    return None;
                }
            }
        }
        Some(caps)
    }
}

impl fmt::Display for KeyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl FromStr for KeyExpr {
    type Err = KeyExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Convenience wrapper: parses both sides and matches.
pub fn key_matches(pattern: &str, key: &str) -> Result<bool, KeyExprError> {
    let pattern = KeyExpr::parse(pattern)?;
    let key = KeyExpr::parse_literal(key)?;
    Ok(pattern.matches(&key))
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TemplateToken {
    Literal(String),
    Capture(usize),
}

/// Re-keys envelopes matching `external` by substituting the captured
/// segments into the `internal` template.
///
/// The template refers to captures either as `$1`, `$2`, ... or
/// positionally by repeating the external wildcards in the same order
/// (`avp/*/status` -> `local/*/status`). Every capture must be used exactly
/// once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemapRule {
    external: KeyExpr,
    internal: String,
    template: Vec<TemplateToken>,
}

impl RemapRule {
    pub fn new(external: &str, internal: &str) -> Result<Self, KeyExprError> {
        let ext = KeyExpr::parse(external)?;
        let mismatch = |reason: String| KeyExprError::RemapMismatch {
            external: external.to_string(),
            internal: internal.to_string(),
            reason,
        };
        if internal.is_empty() {
            return Err(KeyExprError::Empty);
        }
        let ext_wild: Vec<&Segment> = ext.segments.iter().filter(|s| s.is_wildcard()).collect();

        let mut template = Vec::new();
        let mut positional = 0usize;
        let mut dollar = false;
        for (index, tok) in internal.split('/').enumerate() {
            match tok {
                "" => {
                    return Err(KeyExprError::EmptySegment {
                        expr: internal.to_string(),
                        index,
                    })
                }
                "*" | "**" => {
                    let kind = if tok == "*" { Segment::Star } else { Segment::DoubleStar };
                    match ext_wild.get(positional) {
                        Some(k) if **k == kind => {}
                        Some(_) => {
                            return Err(mismatch(format!(
                                "wildcard {} is `{tok}` but the external pattern has a different kind there",
                                positional + 1
                            )))
                        }
                        None => {
                            return Err(mismatch(format!(
                                "template has more wildcards than the external pattern ({})",
                                ext_wild.len()
                            )))
                        }
                    }
                    template.push(TemplateToken::Capture(positional));
                    positional += 1;
                }
                t if t.starts_with('$') => {
                    let n: usize = t[1..]
                        .parse()
                        .map_err(|_| mismatch(format!("bad capture reference `{t}`")))?;
                    if n == 0 || n > ext_wild.len() {
                        return Err(mismatch(format!(
                            "capture `{t}` out of range (external pattern has {} wildcards)",
                            ext_wild.len()
                        )));
                    }
                    dollar = true;
                    template.push(TemplateToken::Capture(n - 1));
                }
                t if t.contains('*') => {
                    return Err(KeyExprError::MixedWildcard {
                        expr: internal.to_string(),
                        segment: t.to_string(),
                    })
                }
                t => template.push(TemplateToken::Literal(t.to_string())),
            }
        }
        if dollar && positional > 0 {
            return Err(mismatch("cannot mix `$n` references with positional wildcards".into()));
        }
        let mut used: Vec<usize> = template
            .iter()
            .filter_map(|t| match t {
                TemplateToken::Capture(i) => Some(*i),
                TemplateToken::Literal(_) => None,
            })
            .collect();
        used.sort_unstable();
        if used != (0..ext_wild.len()).collect::<Vec<_>>() {
            return Err(mismatch(format!(
                "external pattern has {} wildcards but the template uses {} captures",
                ext_wild.len(),
                used.len()
            )));
        }
        Ok(Self {
            external: ext,
            internal: internal.to_string(),
            template,
        })
    }

    pub fn external(&self) -> &KeyExpr {
        &self.external
    }

    pub fn internal(&self) -> &str {
        &self.internal
    }

    /// Returns the re-keyed key, or `None` when `key` does not match.
    pub fn apply(&self, key: &KeyExpr) -> Option<KeyExpr> {
        let caps = self.external.captures(key)?;
        let mut out: Vec<&str> = Vec::new();
        for tok in &self.template {
            match tok {
                TemplateToken::Literal(l) => out.push(l),
                TemplateToken::Capture(i) => out.extend(caps[*i].iter().copied()),
            }
        }
        if out.is_empty() {
            return None;
        }
        KeyExpr::parse_literal(&out.join("/")).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_segment_wildcard() {
        assert!(key_matches("avp/*/status", "avp/v1/status").unwrap());
        assert!(!key_matches("avp/*/status", "avp/coord/queue").unwrap());
        assert!(!key_matches("avp/*/status", "avp/v1/x/status").unwrap());
    }

    #[test]
    fn double_star_matches_zero_or_more() {
        assert!(key_matches("avp/**", "avp/v2/goal/active").unwrap());
        assert!(key_matches("avp/**", "avp").unwrap());
        assert!(key_matches("**", "a/b/c").unwrap());
        assert!(key_matches("a/**/z", "a/z").unwrap());
        assert!(key_matches("a/**/z", "a/b/c/z").unwrap());
        assert!(!key_matches("a/**/z", "a/b/c").unwrap());
    }

    #[test]
    fn malformed_expressions_name_the_segment() {
        assert_eq!(KeyExpr::parse(""), Err(KeyExprError::Empty));
        let err = KeyExpr::parse("avp//x").unwrap_err();
        assert_eq!(
            err,
            KeyExprError::EmptySegment {
                expr: "avp//x".into(),
                index: 1
            }
        );
        let err = KeyExpr::parse("avp/v*/x").unwrap_err();
        assert!(err.to_string().contains("`v*`"), "{err}");
        let err = KeyExpr::parse("**/a/**").unwrap_err();
        assert!(matches!(err, KeyExprError::RepeatedDoubleStar { index: 2, .. }));
        let err = KeyExpr::parse_literal("avp/*/x").unwrap_err();
        assert!(err.to_string().contains("`*`"), "{err}");
    }

    #[test]
    fn remap_direct_substitution() {
        let rule = RemapRule::new("avp/*/status", "local/$1/status").unwrap();
        let key = KeyExpr::parse_literal("avp/v3/status").unwrap();
        assert_eq!(rule.apply(&key).unwrap().as_str(), "local/v3/status");
        let other = KeyExpr::parse_literal("avp/v3/path").unwrap();
        assert!(rule.apply(&other).is_none());
    }

    #[test]
    fn remap_positional_and_double_star() {
        let rule = RemapRule::new("avp/**", "mirror/**").unwrap();
        let key = KeyExpr::parse_literal("avp/v1/goal/active").unwrap();
        assert_eq!(rule.apply(&key).unwrap().as_str(), "mirror/v1/goal/active");
        let key = KeyExpr::parse_literal("avp").unwrap();
        assert_eq!(rule.apply(&key).unwrap().as_str(), "mirror");
    }

    #[test]
    fn remap_rejects_mismatched_wildcards() {
        assert!(matches!(
            RemapRule::new("avp/*/status", "local/status"),
            Err(KeyExprError::RemapMismatch { .. })
        ));
        assert!(matches!(
            RemapRule::new("avp/*/status", "local/$1/$2"),
            Err(KeyExprError::RemapMismatch { .. })
        ));
        assert!(matches!(
            RemapRule::new("avp/*/status", "local/**/status"),
            Err(KeyExprError::RemapMismatch { .. })
        ));
        assert!(matches!(
            RemapRule::new("avp/*/*", "local/$1/$1"),
            Err(KeyExprError::RemapMismatch { .. })
        ));
    }
}
