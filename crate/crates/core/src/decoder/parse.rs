use super::vocab::{DESCRIPTOR_KEY, EMOTION_KEY, EOS, SEP, TRANSCRIPT_KEY};
use crate::emotion::Emotion;

/// Fields recovered from a generated response. Each is absent when missing
/// or malformed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedResponse {
    pub transcript: Option<Vec<String>>,
    pub descriptor: Option<Vec<String>>,
    pub emotion: Option<Emotion>,
}

impl ParsedResponse {
    pub fn is_empty(&self) -> bool {
        self.transcript.is_none() && self.descriptor.is_none() && self.emotion.is_none()
    }
}

/// Parses `transcript: … SEP descriptor: … SEP emotion: <label>`.
///
/// Everything from the first EOS on is ignored. Segments are split on SEP
/// and keyed by their first token; unknown keys are skipped and the first
/// occurrence of a key wins. A field with no words is absent, and the
/// emotion field must be exactly one known label.
pub fn parse_response<S: AsRef<str>>(tokens: &[S]) -> ParsedResponse {
    let end = tokens.iter().position(|t| t.as_ref() == EOS).unwrap_or(tokens.len());
    let mut out = ParsedResponse::default();
    let mut seen = [false; 3];
    for segment in tokens[..end].split(|t| t.as_ref() == SEP) {
        let Some((key, rest)) = segment.split_first() else {
            continue;
        };
        let words: Vec<String> = rest.iter().map(|t| t.as_ref().to_string()).collect();
        let slot = match key.as_ref() {
            TRANSCRIPT_KEY => 0,
            DESCRIPTOR_KEY => 1,
            EMOTION_KEY => 2,
            _ => continue,
        };
        if std::mem::replace(&mut seen[slot], true) {
            continue;
        }
        match slot {
            0 if !words.is_empty() => out.transcript = Some(words),
            1 if !words.is_empty() => out.descriptor = Some(words),
            2 if words.len() == 1 => out.emotion = Emotion::parse(&words[0]),
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn full_response() {
        let r = parse_response(&toks(
            "transcript: hello world <sep> descriptor: a high pitched voice <sep> emotion: happy <eos>",
        ));
        assert_eq!(r.transcript, Some(toks("hello world")));
        assert_eq!(r.descriptor, Some(toks("a high pitched voice")));
        assert_eq!(r.emotion, Some(Emotion::Happy));
    }

    #[test]
    fn unknown_label_and_empty_input() {
        assert_eq!(parse_response(&toks("emotion: joyful")).emotion, None);
        assert!(parse_response::<String>(&[]).is_empty());
        assert!(parse_response(&toks("garbage tokens only")).is_empty());
    }

    #[test]
    fn malformed_fields_are_absent() {
        let r = parse_response(&toks("transcript: <sep> emotion: sad angry <sep> descriptor: calm"));
        assert_eq!(r.transcript, None);
        assert_eq!(r.emotion, None);
        assert_eq!(r.descriptor, Some(toks("calm")));

        let r = parse_response(&toks("transcript: a b <eos> <sep> emotion: sad"));
        assert_eq!(r.transcript, Some(toks("a b")));
        assert_eq!(r.emotion, None);

        let r = parse_response(&toks("emotion: sad <sep> emotion: angry"));
        assert_eq!(r.emotion, Some(Emotion::Sad));
    }
}
