//! Seeded synthetic corpus for desk-scale experiments.
//!
//! Each domain owns a disjoint set of labels. Utterances are carrier phrases
//! over a shared filler vocabulary. A slot example inserts one run of value
//! tokens whose type (like dates or cities) is tied to the label; types and
//! their vocabularies are shared across domains while label names are not.
//! An intent example scatters a few of its label's own trigger tokens.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math::derive_seed;
use crate::model::{Dataset, Example, LabeledSpan, Task, Utterance};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub labels: usize,
    pub instances_per_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGrammar {
    /// Shared filler vocabulary size.
    pub filler_vocab: usize,
    /// Inclusive range of filler tokens per utterance.
    pub filler_len: (usize, usize),
    /// Carrier phrases shared by every domain; 0 draws fillers independently.
    pub templates: usize,
    /// Slot value types shared by every domain. Each slot label draws its
    /// values from `types_per_label` of them; labels of one domain never
    /// share a type.
    pub value_types: usize,
    pub types_per_label: usize,
    /// Value tokens per type.
    pub type_vocab: usize,
    /// Inclusive range of value tokens per slot span.
    pub value_len: (usize, usize),
    /// Trigger tokens owned by each intent label.
    pub trigger_pool: usize,
    /// Inclusive range of trigger tokens per intent utterance.
    pub trigger_len: (usize, usize),
    pub domains: Vec<DomainSpec>,
    pub seed: u64,
}

impl Default for SynthGrammar {
    fn default() -> Self {
        Self {
            filler_vocab: 40,
            filler_len: (4, 8),
            templates: 6,
            value_types: 10,
            types_per_label: 2,
            type_vocab: 3,
            value_len: (2, 4),
            trigger_pool: 2,
            trigger_len: (1, 2),
            domains: alloc::vec![
                DomainSpec { name: "source".into(), labels: 5, instances_per_label: 100 },
                DomainSpec { name: "dev".into(), labels: 3, instances_per_label: 50 },
                DomainSpec { name: "target".into(), labels: 3, instances_per_label: 30 },
            ],
            seed: 7,
        }
    }
}

impl SynthGrammar {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidConfig { reason });
        if self.filler_vocab == 0 {
            return bad("filler_vocab must be positive".into());
        }
        if self.filler_len.0 > self.filler_len.1 {
            return bad(format!("filler_len range {:?} is empty", self.filler_len));
        }
        if self.types_per_label == 0 {
            return bad("types_per_label must be positive".into());
        }
        if self.type_vocab == 0 {
            return bad("type_vocab must be positive".into());
        }
        if self.value_len.0 == 0 || self.value_len.0 > self.value_len.1 {
            return bad(format!("value_len range {:?} must be non-empty and start at 1 or more", self.value_len));
        }
        if self.trigger_pool == 0 {
            return bad("trigger_pool must be positive".into());
        }
        if self.trigger_len.0 == 0 || self.trigger_len.0 > self.trigger_len.1 {
            return bad(format!("trigger_len range {:?} must be non-empty and start at 1 or more", self.trigger_len));
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.labels == 0 || d.instances_per_label == 0 {
                return bad(format!("domain {:?} needs labels and instances", d.name));
            }
            if d.labels * self.types_per_label > self.value_types {
                return bad(format!("domain {:?} has more labels than value types", d.name));
            }
            if d.name.is_empty() || d.name.chars().any(|c| !c.is_ascii_alphanumeric() && c != '_') {
                return bad(format!("domain name {:?} must be ascii alphanumeric", d.name));
            }
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return bad(format!("duplicate domain {:?}", d.name));
            }
        }
        Ok(())
    }
}

/// Slot and intent datasets of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDomain {
    pub name: String,
    pub slot: Dataset,
    pub intent: Dataset,
}

fn label_name(domain: &str, task: Task, label: usize) -> String {
    format!("{domain}_{}_{label}", task.as_str())
}

fn fillers(grammar: &SynthGrammar, rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.gen_range(grammar.filler_len.0..=grammar.filler_len.1);
    (0..n).map(|_| format!("f{}", rng.gen_range(0..grammar.filler_vocab))).collect()
}

fn carrier(grammar: &SynthGrammar, templates: &[Vec<String>], rng: &mut ChaCha8Rng) -> Vec<String> {
    if templates.is_empty() {
        fillers(grammar, rng)
    } else {
        templates[rng.gen_range(0..templates.len())].clone()
    }
}

fn triggers(grammar: &SynthGrammar, domain: &str, label: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.gen_range(grammar.trigger_len.0..=grammar.trigger_len.1);
    (0..n).map(|_| format!("{domain}_intent{label}_w{}", rng.gen_range(0..grammar.trigger_pool))).collect()
}

fn generate_domain(
    grammar: &SynthGrammar,
    templates: &[Vec<String>],
    spec: &DomainSpec,
    stream: u64,
) -> Result<SynthDomain> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(grammar.seed, stream));
    let name = &spec.name;

    let mut types: Vec<usize> = (0..grammar.value_types).collect();
    types.shuffle(&mut rng);
    let mut order: Vec<usize> =
        (0..spec.labels).flat_map(|l| core::iter::repeat_n(l, spec.instances_per_label)).collect();
    order.shuffle(&mut rng);
    let mut slot = Vec::with_capacity(order.len());
    for (i, &label) in order.iter().enumerate() {
        let mut tokens = carrier(grammar, templates, &mut rng);
        let n = rng.gen_range(grammar.value_len.0..=grammar.value_len.1);
        let ty = types[label * grammar.types_per_label + rng.gen_range(0..grammar.types_per_label)];
        let run: Vec<String> = (0..n).map(|_| format!("t{ty}_{}", rng.gen_range(0..grammar.type_vocab))).collect();
        let at = rng.gen_range(0..=tokens.len());
        let end = at + run.len();
        tokens.splice(at..at, run);
        let utt = Utterance::new(format!("{name}-slot-{i:05}"), tokens)?;
        slot.push(Example::slots(utt, alloc::vec![LabeledSpan::new(at, end, label_name(name, Task::Slot, label))])?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(grammar.seed, stream), 1));
    order.shuffle(&mut rng);
    let mut intent = Vec::with_capacity(order.len());
    for (i, &label) in order.iter().enumerate() {
        let mut tokens = carrier(grammar, templates, &mut rng);
        for t in triggers(grammar, name, label, &mut rng) {
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, t);
        }
        let utt = Utterance::new(format!("{name}-intent-{i:05}"), tokens)?;
        intent.push(Example::intent(utt, label_name(name, Task::Intent, label))?);
    }

    Ok(SynthDomain { name: name.clone(), slot: Dataset::new(slot), intent: Dataset::new(intent) })
}

/// Generates every domain of `grammar`, in declaration order.
pub fn generate(grammar: &SynthGrammar) -> Result<Vec<SynthDomain>> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(grammar.seed, u64::MAX));
    let templates: Vec<Vec<String>> = (0..grammar.templates).map(|_| fillers(grammar, &mut rng)).collect();
    grammar.domains.iter().enumerate().map(|(i, d)| generate_domain(grammar, &templates, d, i as u64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn counts_and_determinism() {
        let g = SynthGrammar::default();
        let a = generate(&g).unwrap();
        assert_eq!(a[0].slot.len(), 500);
        assert_eq!(a[0].intent.len(), 500);
        assert_eq!(a[0].slot.label_set().len(), 5);
        assert_eq!(a, generate(&g).unwrap());
    }

    #[test]
    fn labels_and_triggers_are_domain_private_while_value_types_are_shared() {
        let domains = generate(&SynthGrammar::default()).unwrap();
        let tokens = |d: &Dataset| -> BTreeSet<String> {
            d.examples().iter().flat_map(|e| e.utterance().tokens().to_vec()).collect()
        };
        let trig = |t: &BTreeSet<String>| -> BTreeSet<String> {
            t.iter().filter(|w| w.contains("_intent")).cloned().collect()
        };
        let (src, tgt) = (tokens(&domains[0].intent), tokens(&domains[2].intent));
        assert!(!trig(&src).is_empty());
        assert!(trig(&src).is_disjoint(&trig(&tgt)));
        assert!(domains[0].slot.label_set().is_disjoint(domains[2].slot.label_set()));
        assert!(domains[0].intent.label_set().is_disjoint(domains[2].intent.label_set()));
        let types = |d: &Dataset| -> BTreeSet<String> {
            d.examples()
                .iter()
                .flat_map(|e| {
                    e.slot_spans()
                        .iter()
                        .flat_map(|s| {
                            e.utterance().tokens()[s.start..s.end]
                                .iter()
                                .map(|w| String::from(w.split('_').next().unwrap()))
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        assert!(types(&domains[2].slot).is_subset(&types(&domains[0].slot)));
    }

    #[test]
    fn slot_spans_cover_one_typed_run() {
        let g = SynthGrammar::default();
        for e in generate(&g).unwrap()[0].slot.examples() {
            let s = &e.slot_spans()[0];
            assert!((g.value_len.0..=g.value_len.1).contains(&(s.end - s.start)));
            let toks = &e.utterance().tokens()[s.start..s.end];
            let ty = toks[0].split('_').next().unwrap();
            assert!(ty.starts_with('t') && toks.iter().all(|w| w.starts_with(&format!("{ty}_"))));
        }
    }

    #[test]
    fn rejects_inconsistent_grammar() {
        let g = SynthGrammar { filler_len: (5, 2), ..SynthGrammar::default() };
        assert!(generate(&g).is_err());
        let g = SynthGrammar { trigger_len: (0, 2), ..SynthGrammar::default() };
        assert!(generate(&g).is_err());
        let mut g = SynthGrammar::default();
        g.domains[1].name = "source".into();
        assert!(generate(&g).is_err());
    }
}
