//! Problem corpora, prompt templates, splits, and the synthetic bilingual
//! corpus used to train the toy model.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::PromptPair;
use crate::tokenizer::{self, Fence, Token, EOS};

/// Bundled starter corpus: two reference sample tasks plus substitutes tagged `substitute`.
pub const BUNDLED_PROBLEMS: &str = include_str!("../assets/problems.jsonl");
const BUNDLED_CPP_TEMPLATES: &str = include_str!("../assets/templates_cpp.txt");
const BUNDLED_PYTHON_TEMPLATES: &str = include_str!("../assets/templates_python.txt");

const PLACEHOLDERS: [&str; 2] = ["{description}", "{desc}"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

/// Reads a JSONL corpus: one `{"name", "description", "tags"?}` object per line.
pub fn load_problems(path: &Path) -> Result<Vec<ProblemRecord>> {
    let file = File::open(path)?;
    parse_problems(BufReader::new(file), path)
}

pub fn parse_problems<R: BufRead>(reader: R, path: &Path) -> Result<Vec<ProblemRecord>> {
    let mut out = Vec::new();
    let mut names = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let rec: ProblemRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.description.trim().is_empty() {
            return Err(parse_err("empty description".into()));
        }
        if !names.insert(rec.name.clone()) {
            return Err(parse_err(format!("duplicate problem name {:?}", rec.name)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn bundled_problems() -> Vec<ProblemRecord> {
    parse_problems(BUNDLED_PROBLEMS.as_bytes(), Path::new("<bundled>"))
        .expect("bundled corpus is valid")
}

pub fn save_problems(path: &Path, problems: &[ProblemRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in problems {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded shuffle, then the first `floor(ratio * n)` items train and the rest test.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty set".into()));
    }
    let n_train = (ratio * items.len() as f64).floor() as usize;
    if n_train == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} leaves no training items out of {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

/// The task prompts used for language-preference and code-generation runs.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinPrompt {
    /// Pick one of python/cpp/julia/java, one-word answer.
    LanguagePreference,
    /// Pick one of the four languages and answer with code.
    ActivationPreference,
    /// Pick python or cpp and answer with code.
    CodeGeneration,
}

impl BuiltinPrompt {
    pub const ALL: [BuiltinPrompt; 3] = [
        BuiltinPrompt::LanguagePreference,
        BuiltinPrompt::ActivationPreference,
        BuiltinPrompt::CodeGeneration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinPrompt::LanguagePreference => "language-preference",
            BuiltinPrompt::ActivationPreference => "activation-preference",
            BuiltinPrompt::CodeGeneration => "code-generation",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            BuiltinPrompt::LanguagePreference => {
                include_str!("../assets/prompt_language_preference.txt")
            }
            BuiltinPrompt::ActivationPreference => {
                include_str!("../assets/prompt_activation_preference.txt")
            }
            BuiltinPrompt::CodeGeneration => include_str!("../assets/prompt_code_generation.txt"),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptTemplate {
    /// Free text with exactly one `{description}` (or `{desc}`) placeholder.
    Text(String),
    Builtin(BuiltinPrompt),
}

fn placeholder_count(template: &str) -> usize {
    PLACEHOLDERS.iter().map(|p| template.matches(p).count()).sum()
}

/// Substitutes the problem into a template.
pub fn render_prompt(problem: &ProblemRecord, template: &PromptTemplate) -> Result<String> {
    match template {
        PromptTemplate::Builtin(b) => Ok(b
            .text()
            .replace("{problem name}", &problem.name)
            .replace("{problem description main}", &problem.description)),
        PromptTemplate::Text(t) => render_text(t, &problem.description),
    }
}

fn render_text(template: &str, description: &str) -> Result<String> {
    match placeholder_count(template) {
        1 => {}
        0 => {
            return Err(Error::InvalidArgument(format!(
                "template {template:?} has no {{description}} placeholder"
            )))
        }
        n => {
            return Err(Error::InvalidArgument(format!(
                "template {template:?} has {n} placeholders, expected one"
            )))
        }
    }
    let p = PLACEHOLDERS
        .iter()
        .find(|p| template.contains(**p))
        .expect("one placeholder present");
    Ok(template.replacen(p, description, 1))
}

/// Paired phrasing ensembles: the i-th positive template requests the target
/// language, the i-th negative template the baseline language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub cpp: Vec<String>,
    pub python: Vec<String>,
}

impl TemplateSet {
    pub fn new(cpp: Vec<String>, python: Vec<String>) -> Result<Self> {
        if cpp.is_empty() || cpp.len() != python.len() {
            return Err(Error::InvalidArgument(format!(
                "template sets must be nonempty and equal in size ({} vs {})",
                cpp.len(),
                python.len()
            )));
        }
        for t in cpp.iter().chain(&python) {
            if placeholder_count(t) != 1 {
                return Err(Error::InvalidArgument(format!(
                    "template {t:?} must contain exactly one placeholder"
                )));
            }
        }
        Ok(Self { cpp, python })
    }

    /// The ten-plus-ten English paraphrase ensemble shipped with the crate.
    pub fn bundled() -> Self {
        Self::new(
            parse_template_lines(BUNDLED_CPP_TEMPLATES),
            parse_template_lines(BUNDLED_PYTHON_TEMPLATES),
        )
        .expect("bundled templates are valid")
    }

    /// Reads two plain-text files, one template per line (`#` comments allowed).
    pub fn load(cpp: &Path, python: &Path) -> Result<Self> {
        Self::new(
            parse_template_lines(&std::fs::read_to_string(cpp)?),
            parse_template_lines(&std::fs::read_to_string(python)?),
        )
    }

    /// Phrasings the synthetic toy model understands: each variant places the
    /// language fence somewhere around the description.
    pub fn toy() -> Self {
        let variants = [
            "{description} @\n",
            "{description} @ \n",
            "{description}  @\n",
            "{description}.@\n",
            "{description} @.\n",
            "{description} -@\n",
            "{description}:@\n",
            "{description} @ @\n",
            "{description}, @\n",
            "{description} = @\n",
        ];
        let fill = |f: Fence| {
            variants
                .iter()
                .map(|v| v.replace('@', f.text()))
                .collect::<Vec<_>>()
        };
        Self::new(fill(Fence::Cpp), fill(Fence::Python)).expect("toy templates are valid")
    }

    pub fn len(&self) -> usize {
        self.cpp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cpp.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.cpp
            .iter()
            .zip(&self.python)
            .map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn render_pair(&self, index: usize, description: &str) -> Result<(String, String)> {
        Ok((
            render_text(&self.cpp[index], description)?,
            render_text(&self.python[index], description)?,
        ))
    }
}

fn parse_template_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

/// Problem families of the synthetic corpus. Each family answers in its own
/// code shape, so style differences cluster by family.
const SYNTH_FAMILIES: [SynthFamily; 2] = [
    SynthFamily {
        tag: "general",
        verbs: &["sort", "reverse", "search", "merge", "count", "rotate", "dedupe", "split"],
        nouns: &["list", "array", "string", "words", "keys", "pairs", "queue", "tree"],
        cpp: "```cpp\nvoid {verb}(int* a);",
        python: "```python\ndef {verb}(a): pass",
    },
    SynthFamily {
        tag: "scientific",
        verbs: &["solve", "integrate", "mesh", "fit", "smooth", "sample", "invert", "step"],
        nouns: &["matrix", "grid", "signal", "field", "series", "system", "spline", "orbit"],
        cpp: "```cpp\ndouble {verb}(double x);",
        python: "```python\nimport numpy as np",
    },
];

struct SynthFamily {
    tag: &'static str,
    verbs: &'static [&'static str],
    nouns: &'static [&'static str],
    cpp: &'static str,
    python: &'static str,
}

/// Output of [`synth_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub problems: Vec<ProblemRecord>,
    /// Language-model training sequences (BOS … EOS).
    pub sequences: Vec<Vec<Token>>,
    /// Untagged question with a cpp answer (positive) and a python answer (negative).
    pub pairs: Vec<PromptPair>,
}

/// The untagged question the toy model sees for a description.
pub fn synth_question(description: &str) -> String {
    format!("{description}\n")
}

/// A question that requests `fence` explicitly.
pub fn synth_tagged_question(description: &str, fence: Fence) -> String {
    format!("{description} {}\n", fence.text())
}

/// Builds `n` synthetic problems. Every problem contributes four sequences:
/// cpp-tagged question + cpp answer, python-tagged question + python answer,
/// and the untagged question followed by each answer, so the untagged
/// question carries no language preference.
pub fn synth_corpus(n: usize, seed: u64) -> Result<SynthCorpus> {
    if n == 0 {
        return Err(Error::InvalidArgument("synth_corpus needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::with_capacity(n);
    let mut sequences = Vec::with_capacity(4 * n);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let fam = &SYNTH_FAMILIES[rng.random_range(0..SYNTH_FAMILIES.len())];
        let verb = fam.verbs[rng.random_range(0..fam.verbs.len())];
        let noun = fam.nouns[rng.random_range(0..fam.nouns.len())];
        let num: u32 = rng.random_range(1..100);
        let description = format!("{verb} {noun} {num}");
        let name = format!("synth-{i:04}");
        let positive = fam.cpp.replace("{verb}", verb);
        let negative = fam.python.replace("{verb}", verb);
        let untagged = synth_question(&description);

        let seq = |q: &str, a: &str| {
            let mut s = tokenizer::encode_prompt(q);
            s.extend(tokenizer::encode(a));
            s.push(EOS);
            s
        };
        sequences.push(seq(&synth_tagged_question(&description, Fence::Cpp), &positive));
        sequences.push(seq(&synth_tagged_question(&description, Fence::Python), &negative));
        sequences.push(seq(&untagged, &positive));
        sequences.push(seq(&untagged, &negative));

        pairs.push(PromptPair::new(name.clone(), untagged, positive, negative)?);
        problems.push(ProblemRecord {
            name,
            description,
            tags: vec!["synthetic".into(), fam.tag.into()],
        });
    }
    Ok(SynthCorpus {
        problems,
        sequences,
        pairs,
    })
}
