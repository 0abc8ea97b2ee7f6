//! Instruction-example ingestion (JSONL), response-length filtering,
//! deterministic splitting, and a synthetic toy-instruction corpus whose
//! responses follow a seeded order-2 Markov pattern that a tabular model
//! can represent exactly.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{Prompt, TokenId, Trajectory, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
}

impl InstructionExample {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.is_empty() || self.output.is_empty() {
            return Err(Error::domain(
                "instruction and output must both be nonempty",
            ));
        }
        Ok(())
    }
}

/// Tokenized form of one example: the prompt covers instruction + input,
/// the response carries a trailing EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub prompt: Prompt,
    pub response: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    examples: Vec<InstructionExample>,
    tokenized: Vec<TokenizedExample>,
    vocab: Vocab,
}

impl Corpus {
    pub fn from_examples(examples: Vec<InstructionExample>, vocab: &Vocab) -> Result<Self> {
        let tokenized = examples
            .iter()
            .map(|ex| tokenize_example(ex, vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            examples,
            tokenized,
            vocab: vocab.clone(),
        })
    }

    pub fn examples(&self) -> &[InstructionExample] {
        &self.examples
    }

    pub fn tokenized(&self) -> &[TokenizedExample] {
        &self.tokenized
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(
                &serde_json::to_string(ex)
                    .map_err(|e| Error::domain(format!("serialize example: {e}")))?,
            );
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Whitespace tokenization with OOV mapped to the vocabulary's `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let unk = vocab.unk_id();
    text.split_whitespace()
        .map(|w| match vocab.lookup(w) {
            Some(id) => Ok(id),
            None => unk.ok_or_else(|| {
                Error::domain(format!("token {w:?} not in vocabulary and no <unk> defined"))
            }),
        })
        .collect()
}

fn tokenize_example(ex: &InstructionExample, vocab: &Vocab) -> Result<TokenizedExample> {
    ex.validate()?;
    let mut prompt_tokens = tokenize(&ex.instruction, vocab)?;
    prompt_tokens.extend(tokenize(&ex.input, vocab)?);
    // eos never appears in whitespace-tokenized text, but guard anyway
    prompt_tokens.retain(|&t| t != vocab.eos_id());
    let prompt = Prompt::new(prompt_tokens, vocab)?;
    let mut response_tokens = tokenize(&ex.output, vocab)?;
    response_tokens.retain(|&t| t != vocab.eos_id());
    if response_tokens.is_empty() {
        return Err(Error::domain("response tokenized to nothing"));
    }
    response_tokens.push(vocab.eos_id());
    let response = Trajectory::new(response_tokens, true, vocab)?;
    Ok(TokenizedExample { prompt, response })
}

/// Load a JSONL corpus of `{"instruction", "input", "output"}` records,
/// preserving file order.
pub fn load_jsonl(path: &Path, vocab: &Vocab) -> Result<Corpus> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "expected a JSON object".into(),
        })?;
        let field = |key: &str, required: bool| -> Result<String> {
            match obj.get(key) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                None if !required => Ok(String::new()),
                _ => Err(Error::Schema {
                    line: line_no,
                    key: key.to_string(),
                }),
            }
        };
        let ex = InstructionExample {
            instruction: field("instruction", true)?,
            input: field("input", false)?,
            output: field("output", true)?,
        };
        ex.validate().map_err(|_| Error::Schema {
            line: line_no,
            key: "instruction/output".into(),
        })?;
        examples.push(ex);
    }
    Corpus::from_examples(examples, vocab)
}

/// Keep exactly the examples whose whitespace word count of `output` is at
/// least `min_words`; stable order.
pub fn filter_by_length(corpus: &Corpus, min_words: usize) -> Result<Corpus> {
    let examples: Vec<InstructionExample> = corpus
        .examples()
        .iter()
        .filter(|ex| ex.output.split_whitespace().count() >= min_words)
        .cloned()
        .collect();
    Corpus::from_examples(examples, corpus.vocab())
}

/// Deterministic shuffled split into train/valid/test. Fractions must be
/// positive-sum and total 1; sizes match the fractional targets to within
/// rounding.
pub fn split(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 || a + b + c <= 0.0 {
        return Err(Error::domain(
            "split fractions must be nonnegative and sum to 1",
        ));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (a * n as f64).round() as usize;
    let n_valid = (b * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_valid = n_valid.min(n - n_train);
    let pick = |idx: &[usize]| -> Result<Corpus> {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        let examples = sorted
            .iter()
            .map(|&i| corpus.examples()[i].clone())
            .collect();
        Corpus::from_examples(examples, corpus.vocab())
    };
    Ok((
        pick(&order[..n_train])?,
        pick(&order[n_train..n_train + n_valid])?,
        pick(&order[n_train + n_valid..])?,
    ))
}

/// Templated instruction/response generator. Instructions pick one of a
/// few fixed patterns over the content tokens; responses follow a seeded
/// order-2 Markov chain over the content vocabulary, so an order-2 tabular
/// model can fit them near-exactly.
pub fn synth_toy_corpus(
    vocab: &Vocab,
    grammar_seed: u64,
    n_examples: usize,
    length_range: (usize, usize),
) -> Result<Corpus> {
    if n_examples == 0 {
        return Err(Error::domain("n_examples must be at least 1"));
    }
    let (lo, hi) = length_range;
    if lo == 0 || hi < lo {
        return Err(Error::domain("invalid length range"));
    }
    let content: Vec<(TokenId, String)> = (0..vocab.size())
        .filter(|&id| id != vocab.bos_id() && id != vocab.eos_id() && vocab.unk_id() != Some(id))
        .map(|id| (id, vocab.token(id).unwrap().to_string()))
        .collect();
    if content.is_empty() {
        return Err(Error::domain("vocabulary has no content tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(grammar_seed);
    // fixed per-grammar transition preferences: after (prev2, prev1) one
    // content token is strongly favored
    let nc = content.len();
    let favored: Vec<usize> = (0..nc * nc).map(|_| rng.gen_range(0..nc)).collect();
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let start = rng.gen_range(0..nc);
        let instruction = format!("say {}", content[start].1);
        let len = rng.gen_range(lo..=hi);
        let mut resp_ids: Vec<usize> = vec![start];
        while resp_ids.len() < len {
            let prev1 = *resp_ids.last().unwrap();
            let prev2 = if resp_ids.len() >= 2 {
                resp_ids[resp_ids.len() - 2]
            } else {
                prev1
            };
            let next = if rng.gen_bool(0.85) {
                favored[prev2 * nc + prev1]
            } else {
                rng.gen_range(0..nc)
            };
            resp_ids.push(next);
        }
        let output = resp_ids
            .iter()
            .map(|&i| content[i].1.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        examples.push(InstructionExample {
            instruction,
            input: String::new(),
            output,
        });
    }
    Corpus::from_examples(examples, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocab {
        Vocab::with_content(&["say", "a", "b"]).unwrap()
    }

    #[test]
    fn load_jsonl_cases() {
        let dir = tempfile::tempdir().unwrap();
        let v = toy_vocab();

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_jsonl(&empty, &v).unwrap().is_empty());

        let one = dir.path().join("one.jsonl");
        std::fs::write(&one, r#"{"instruction":"say a","input":"","output":"a b"}"#).unwrap();
        let c = load_jsonl(&one, &v).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.examples()[0].instruction, "say a");
        assert_eq!(c.examples()[0].output, "a b");

        let missing = dir.path().join("missing.jsonl");
        std::fs::write(&missing, r#"{"instruction":"say a","input":""}"#).unwrap();
        match load_jsonl(&missing, &v) {
            Err(Error::Schema { line, key }) => {
                assert_eq!(line, 1);
                assert_eq!(key, "output");
            }
            other => panic!("expected schema error, got {other:?}"),
        }

        let malformed = dir.path().join("bad.jsonl");
        std::fs::write(&malformed, "{\"instruction\": \"x\"\nnot json").unwrap();
        assert!(matches!(
            load_jsonl(&malformed, &v),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = toy_vocab();
        let ids = tokenize("say zebra a", &v).unwrap();
        assert_eq!(ids, vec![v.lookup("say").unwrap(), v.unk_id().unwrap(), v.lookup("a").unwrap()]);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = toy_vocab();
        let c = synth_toy_corpus(&v, 1, 20, (1, 4)).unwrap();
        let path = dir.path().join("c.jsonl");
        c.save_jsonl(&path).unwrap();
        let back = load_jsonl(&path, &v).unwrap();
        assert_eq!(c.examples(), back.examples());
    }

    #[test]
    fn filter_by_length_cases() {
        let v = toy_vocab();
        let mk = |words: usize| InstructionExample {
            instruction: "say a".into(),
            input: String::new(),
            output: vec!["a"; words].join(" "),
        };
        let c = Corpus::from_examples(vec![mk(10), mk(11), mk(3)], &v).unwrap();
        let all = filter_by_length(&c, 0).unwrap();
        assert_eq!(all.len(), 3);
        let kept = filter_by_length(&c, 11).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.examples()[0].output.split_whitespace().count(), 11);
        // idempotent
        let again = filter_by_length(&kept, 11).unwrap();
        assert_eq!(again.examples(), kept.examples());
        // matches brute-force scan
        let brute: Vec<_> = c
            .examples()
            .iter()
            .filter(|e| e.output.split_whitespace().count() >= 11)
            .cloned()
            .collect();
        assert_eq!(kept.examples(), brute.as_slice());
    }

    #[test]
    fn split_cases() {
        let v = toy_vocab();
        let c = synth_toy_corpus(&v, 2, 100, (1, 3)).unwrap();
        let (tr, va, te) = split(&c, (1.0, 0.0, 0.0), 5).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (100, 0, 0));
        let (tr, va, te) = split(&c, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        // deterministic
        let (tr2, _, _) = split(&c, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!(tr.examples(), tr2.examples());
        // disjoint union equals corpus
        let mut union: Vec<_> = tr
            .examples()
            .iter()
            .chain(va.examples())
            .chain(te.examples())
            .cloned()
            .collect();
        assert_eq!(union.len(), c.len());
        union.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
        let mut orig: Vec<_> = c.examples().to_vec();
        orig.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
        assert_eq!(union, orig);
        assert!(split(&c, (0.5, 0.1, 0.1), 5).is_err());
    }

    #[test]
    fn synth_corpus_contract() {
        let v = toy_vocab();
        let one = synth_toy_corpus(&v, 7, 1, (2, 4)).unwrap();
        let again = synth_toy_corpus(&v, 7, 1, (2, 4)).unwrap();
        assert_eq!(one.examples(), again.examples());
        let c = synth_toy_corpus(&v, 8, 50, (2, 4)).unwrap();
        for ex in c.examples() {
            let words = ex.output.split_whitespace().count();
            assert!((2..=4).contains(&words), "length {words}");
        }
        // tokenized responses end with eos and prompts avoid eos
        for t in c.tokenized() {
            assert!(t.response.terminated());
        }
    }
}
