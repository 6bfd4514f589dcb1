//! BIO-tagged text to span examples.
//!
//! Input is column format: one `token tag` pair per line, a blank line
//! between utterances. `I-x` without a preceding `B-x`/`I-x` opens a new
//! span, as conlleval does.

use spanret_core::{Dataset, Example, LabeledSpan, Utterance};

fn close(open: &mut Option<(usize, String)>, end: usize, spans: &mut Vec<LabeledSpan>) {
    if let Some((start, label)) = open.take() {
        spans.push(LabeledSpan::new(start, end, label));
    }
}

/// Spans encoded by one tag sequence.
pub fn tags_to_spans(tags: &[&str]) -> Result<Vec<LabeledSpan>, String> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        if *tag == "O" {
            close(&mut open, i, &mut spans);
            continue;
        }
        let (prefix, label) = tag.split_once('-').ok_or_else(|| format!("malformed tag {tag:?}"))?;
        if label.is_empty() {
            return Err(format!("malformed tag {tag:?}"));
        }
        match prefix {
            "B" => {
                close(&mut open, i, &mut spans);
                open = Some((i, label.to_string()));
            }
            "I" if open.as_ref().is_some_and(|(_, l)| l == label) => {}
            "I" => {
                close(&mut open, i, &mut spans);
                open = Some((i, label.to_string()));
            }
            _ => return Err(format!("malformed tag {tag:?}")),
        }
    }
    close(&mut open, tags.len(), &mut spans);
    Ok(spans)
}

/// Parses column-format BIO text; ids are `{prefix}-{n:05}`. Errors carry
/// the 1-based line number.
pub fn convert(text: &str, prefix: &str) -> Result<Dataset, (usize, String)> {
    let mut examples = Vec::new();
    let mut block: Vec<(usize, &str, &str)> = Vec::new();
    let mut flush = |block: &mut Vec<(usize, &str, &str)>| -> Result<(), (usize, String)> {
        if block.is_empty() {
            return Ok(());
        }
        let first = block[0].0;
        let tokens: Vec<String> = block.iter().map(|(_, t, _)| t.to_string()).collect();
        let tags: Vec<&str> = block.iter().map(|(_, _, g)| *g).collect();
        let spans = tags_to_spans(&tags).map_err(|e| (first, e))?;
        let utt =
            Utterance::new(format!("{prefix}-{:05}", examples.len()), tokens).map_err(|e| (first, e.to_string()))?;
        examples.push(Example::slots(utt, spans).map_err(|e| (first, e.to_string()))?);
        block.clear();
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (None, _, _) => flush(&mut block)?,
            (Some(tok), Some(tag), None) => block.push((i + 1, tok, tag)),
            _ => return Err((i + 1, "expected \"token tag\"".into())),
        }
    }
    flush(&mut block)?;
    Ok(Dataset::new(examples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_decode_to_spans() {
        let s = tags_to_spans(&["O", "B-time", "I-time", "B-loc", "I-date", "O"]).unwrap();
        assert_eq!(
            s,
            vec![LabeledSpan::new(1, 3, "time"), LabeledSpan::new(3, 4, "loc"), LabeledSpan::new(4, 5, "date")]
        );
        assert!(tags_to_spans(&["X-y"]).is_err());
        assert!(tags_to_spans(&["B"]).is_err());
    }

    #[test]
    fn converts_blocks() {
        let d = convert("wake O\nme O\nat O\n7 B-time\npm I-time\n\nhi O\n", "s").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.examples()[0].slot_spans(), &[LabeledSpan::new(3, 5, "time")]);
        assert_eq!(d.examples()[1].id(), "s-00001");
        assert_eq!(convert("a O\nb\n", "s").unwrap_err().0, 2);
    }
}
