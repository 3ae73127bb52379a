//! Smali class parsing, normalization, de-duplication and API-call filtering.
//!
//! One `.smali` file holds one class. Every non-empty, non-comment source
//! line becomes an [`Instruction`] after normalization: directives
//! (`.method`, `.field`, ...), labels (`:goto_0`) and opcodes all count, so
//! the instruction stream preserves class structure. De-duplication is by
//! content (the ordered normalized instruction texts), not by class name,
//! since repackaged library classes carry identical bodies under different
//! names.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    Opcode,
    Directive,
    Label,
    ApiCall,
}

impl InstructionKind {
    pub fn name(self) -> &'static str {
        match self {
            InstructionKind::Opcode => "opcode",
            InstructionKind::Directive => "directive",
            InstructionKind::Label => "label",
            InstructionKind::ApiCall => "api_call",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "opcode" => Some(InstructionKind::Opcode),
            "directive" => Some(InstructionKind::Directive),
            "label" => Some(InstructionKind::Label),
            "api_call" => Some(InstructionKind::ApiCall),
            _ => None,
        }
    }
}

impl fmt::Display for InstructionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One normalized source line.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub text: String,
    pub kind: InstructionKind,
}

fn classify(text: &str) -> InstructionKind {
    if text.starts_with('.') {
        InstructionKind::Directive
    } else if text.starts_with(':') {
        InstructionKind::Label
    } else if text.starts_with("invoke") {
        InstructionKind::ApiCall
    } else {
        InstructionKind::Opcode
    }
}

/// Normalize one raw source line: trim, strip `#` comments outside string
/// and char literals, collapse whitespace runs outside literals. Returns
/// `None` for blank or comment-only lines.
pub fn normalize_instruction(raw_line: &str) -> Option<Instruction> {
    let mut out = String::with_capacity(raw_line.len());
    let mut pending_space = false;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for c in raw_line.chars() {
        if let Some(q) = quote {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        if c == '#' {
            break;
        }
        if c.is_whitespace() {
            if !out.is_empty() {
                pending_space = true;
            }
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        if c == '"' || c == '\'' {
            quote = Some(c);
        }
        out.push(c);
    }
    // An unterminated literal can leave trailing whitespace; drop it.
    let trimmed = out.trim_end();
    if trimmed.len() != out.len() {
        out.truncate(trimmed.len());
    }
    if out.is_empty() {
        return None;
    }
    let kind = classify(&out);
    Some(Instruction { text: out, kind })
}

/// Warning attached to a line that could not be decoded; the line is skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

/// A parsed class: the unit of labeling and embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmaliClass {
    pub name: String,
    pub instructions: Vec<Instruction>,
    pub content_hash: String,
}

/// Hex SHA-256 over the ordered normalized instruction texts (name excluded).
pub fn content_hash(instructions: &[Instruction]) -> String {
    let mut hasher = Sha256::new();
    for ins in instructions {
        hasher.update(ins.text.as_bytes());
        hasher.update(b"\n");
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

impl SmaliClass {
    pub fn new(name: String, instructions: Vec<Instruction>) -> Self {
        let content_hash = content_hash(&instructions);
        SmaliClass {
            name,
            instructions,
            content_hash,
        }
    }

    /// Copy retaining only API-call instructions, order preserved. The result
    /// may be empty; callers decide how to treat invoke-free classes.
    pub fn filter_api_calls(&self) -> SmaliClass {
        let kept = self
            .instructions
            .iter()
            .filter(|i| i.kind == InstructionKind::ApiCall)
            .cloned()
            .collect();
        SmaliClass::new(self.name.clone(), kept)
    }

    /// Copy with debug-info directives removed (`.line`, `.local`,
    /// `.end local`, `.restart local`, `.prologue`, `.epilogue`, `.source`).
    pub fn strip_debug(&self) -> SmaliClass {
        let kept = self
            .instructions
            .iter()
            .filter(|i| !is_debug_directive(&i.text))
            .cloned()
            .collect();
        SmaliClass::new(self.name.clone(), kept)
    }
}

fn is_debug_directive(text: &str) -> bool {
    let mut words = text.split(' ');
    match words.next() {
        Some(".line") | Some(".local") | Some(".prologue") | Some(".epilogue")
        | Some(".source") => true,
        Some(".end") | Some(".restart") => matches!(words.next(), Some("local")),
        _ => false,
    }
}

/// Parse the content of one `.smali` file. The class name comes from the
/// `.class` directive; fails with `MalformedSmali` when it is absent.
pub fn parse_smali_class(text: &str) -> Result<SmaliClass> {
    let (class, warnings) = parse_smali_lossy(text.as_bytes())?;
    debug_assert!(warnings.is_empty());
    Ok(class)
}

/// Byte-level variant: lines that are not valid UTF-8 are skipped with a
/// per-line warning instead of failing the whole file.
pub fn parse_smali_lossy(bytes: &[u8]) -> Result<(SmaliClass, Vec<ParseWarning>)> {
    let mut warnings = Vec::new();
    let mut instructions = Vec::new();
    for (idx, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        match std::str::from_utf8(raw) {
            Ok(line) => {
                if let Some(ins) = normalize_instruction(line) {
                    instructions.push(ins);
                }
            }
            Err(_) => warnings.push(ParseWarning {
                line: idx + 1,
                message: "line is not valid UTF-8, skipped".to_string(),
            }),
        }
    }
    let name = instructions
        .iter()
        .find(|i| i.text == ".class" || i.text.starts_with(".class "))
        .and_then(|i| i.text.split(' ').next_back())
        .filter(|tok| *tok != ".class")
        .map(str::to_string)
        .ok_or_else(|| Error::MalformedSmali("no .class directive".to_string()))?;
    Ok((SmaliClass::new(name, instructions), warnings))
}

/// Keep the first occurrence of each content hash; input order otherwise
/// preserved. Idempotent.
pub fn dedup_classes(classes: Vec<SmaliClass>) -> Vec<SmaliClass> {
    let mut seen = HashSet::new();
    classes
        .into_iter()
        .filter(|c| seen.insert(c.content_hash.clone()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub class_count: usize,
    pub instruction_count: usize,
    pub api_fraction: f64,
}

/// An immutable collection of classes plus derived statistics.
#[derive(Clone, Debug)]
pub struct Corpus {
    classes: Vec<SmaliClass>,
    stats: CorpusStats,
}

fn compute_stats(classes: &[SmaliClass]) -> CorpusStats {
    let instruction_count: usize = classes.iter().map(|c| c.instructions.len()).sum();
    let api_count: usize = classes
        .iter()
        .flat_map(|c| &c.instructions)
        .filter(|i| i.kind == InstructionKind::ApiCall)
        .count();
    CorpusStats {
        class_count: classes.len(),
        instruction_count,
        api_fraction: if instruction_count == 0 {
            0.0
        } else {
            api_count as f64 / instruction_count as f64
        },
    }
}

impl Corpus {
    pub fn from_classes(classes: Vec<SmaliClass>) -> Self {
        let stats = compute_stats(&classes);
        Corpus { classes, stats }
    }

    pub fn classes(&self) -> &[SmaliClass] {
        &self.classes
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn dedup(self) -> Corpus {
        Corpus::from_classes(dedup_classes(self.classes))
    }

    pub fn filter_api_calls(&self) -> Corpus {
        Corpus::from_classes(self.classes.iter().map(SmaliClass::filter_api_calls).collect())
    }

    pub fn strip_debug(&self) -> Corpus {
        Corpus::from_classes(self.classes.iter().map(SmaliClass::strip_debug).collect())
    }

    /// All instruction texts in corpus order, for tokenizer training.
    pub fn instruction_texts(&self) -> impl Iterator<Item = &str> {
        self.classes
            .iter()
            .flat_map(|c| c.instructions.iter().map(|i| i.text.as_str()))
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    name: String,
    hash: String,
    instructions: Vec<String>,
    kinds: Vec<String>,
}

/// Write the canonical corpus format: one JSON object per class per line.
pub fn write_corpus_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for class in corpus.classes() {
        let rec = CorpusRecord {
            name: class.name.clone(),
            hash: class.content_hash.clone(),
            instructions: class.instructions.iter().map(|i| i.text.clone()).collect(),
            kinds: class
                .instructions
                .iter()
                .map(|i| i.kind.name().to_string())
                .collect(),
        };
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Corpus> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut classes = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)?;
        if rec.instructions.len() != rec.kinds.len() {
            return Err(Error::Format(format!(
                "{}:{}: instructions/kinds length mismatch",
                path.display(),
                idx + 1
            )));
        }
        let mut instructions = Vec::with_capacity(rec.instructions.len());
        for (text, kind_name) in rec.instructions.into_iter().zip(&rec.kinds) {
            let kind = InstructionKind::from_name(kind_name).ok_or_else(|| {
                Error::Format(format!("{}:{}: unknown kind {kind_name}", path.display(), idx + 1))
            })?;
            if kind != classify(&text) {
                return Err(Error::Format(format!(
                    "{}:{}: kind {kind_name} inconsistent with text {text:?}",
                    path.display(),
                    idx + 1
                )));
            }
            instructions.push(Instruction { text, kind });
        }
        classes.push(SmaliClass::new(rec.name, instructions));
    }
    Ok(Corpus::from_classes(classes))
}

#[derive(Deserialize)]
struct RawSmaliRecord {
    name: Option<String>,
    smali: String,
}

/// Load classes from a directory tree of `.smali` files or from a JSONL
/// export with records `{"name", "smali"}`. Files are visited in sorted
/// path order so the corpus is deterministic.
pub fn load_corpus(input: &Path) -> Result<(Corpus, Vec<(PathBuf, ParseWarning)>)> {
    if !input.exists() {
        return Err(Error::MissingInput(input.to_path_buf()));
    }
    let mut warnings = Vec::new();
    let mut classes = Vec::new();
    if input.is_dir() {
        let mut files = Vec::new();
        collect_smali_files(input, &mut files)?;
        files.sort();
        for path in files {
            let bytes = fs::read(&path)?;
            let (class, file_warnings) = parse_smali_lossy(&bytes)
                .map_err(|e| Error::MalformedSmali(format!("{}: {e}", path.display())))?;
            warnings.extend(file_warnings.into_iter().map(|w| (path.clone(), w)));
            classes.push(class);
        }
    } else {
        let file = BufReader::new(fs::File::open(input)?);
        for (idx, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RawSmaliRecord = serde_json::from_str(&line)?;
            let (mut class, file_warnings) = parse_smali_lossy(rec.smali.as_bytes())
                .map_err(|e| Error::MalformedSmali(format!("{}:{}: {e}", input.display(), idx + 1)))?;
            if let Some(name) = rec.name.filter(|n| !n.is_empty()) {
                class.name = name;
            }
            warnings.extend(file_warnings.into_iter().map(|w| (input.to_path_buf(), w)));
            classes.push(class);
        }
    }
    Ok((Corpus::from_classes(classes), warnings))
}

fn collect_smali_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_smali_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "smali") {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const THREE_METHODS: &str = include_str!("../tests/fixtures/three_methods.smali");
    const THREE_METHODS_GOLDEN: &str = include_str!("../tests/fixtures/three_methods.golden.tsv");

    #[test]
    fn minimal_class_parses() {
        let class = parse_smali_class(".class Lcom/a/B;").unwrap();
        assert_eq!(class.name, "Lcom/a/B;");
        assert_eq!(class.instructions.len(), 1);
        assert_eq!(class.instructions[0].text, ".class Lcom/a/B;");
        assert_eq!(class.instructions[0].kind, InstructionKind::Directive);
    }

    #[test]
    fn missing_class_directive_is_malformed() {
        let err = parse_smali_class(".super Ljava/lang/Object;").unwrap_err();
        assert!(matches!(err, Error::MalformedSmali(_)));
    }

    #[test]
    fn invoke_line_normalizes_to_api_call() {
        let ins = normalize_instruction(
            "    invoke-virtual {v0}, Ljava/lang/String;->length()I   # call",
        )
        .unwrap();
        assert_eq!(ins.text, "invoke-virtual {v0}, Ljava/lang/String;->length()I");
        assert_eq!(ins.kind, InstructionKind::ApiCall);
    }

    #[test]
    fn blank_and_comment_lines_are_absent() {
        assert_eq!(normalize_instruction(""), None);
        assert_eq!(normalize_instruction("   "), None);
        assert_eq!(normalize_instruction("  # only a comment"), None);
    }

    #[test]
    fn hash_inside_string_literal_is_preserved() {
        let ins = normalize_instruction("  const-string v1, \"a # b\"  ").unwrap();
        assert_eq!(ins.text, "const-string v1, \"a # b\"");
        assert_eq!(ins.kind, InstructionKind::Opcode);
    }

    #[test]
    fn whitespace_inside_literal_is_preserved() {
        let ins = normalize_instruction("const-string v0, \"two  spaces\"").unwrap();
        assert_eq!(ins.text, "const-string v0, \"two  spaces\"");
    }

    #[test]
    fn label_kind() {
        let ins = normalize_instruction(":label_3").unwrap();
        assert_eq!(ins.kind, InstructionKind::Label);
    }

    #[test]
    fn three_method_fixture_matches_hand_written_golden() {
        let class = parse_smali_class(THREE_METHODS).unwrap();
        assert_eq!(class.name, "Lcom/example/fixture/Widget;");
        let golden: Vec<(InstructionKind, &str)> = THREE_METHODS_GOLDEN
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (kind, text) = l.split_once('\t').unwrap();
                (InstructionKind::from_name(kind).unwrap(), text)
            })
            .collect();
        let got: Vec<(InstructionKind, &str)> = class
            .instructions
            .iter()
            .map(|i| (i.kind, i.text.as_str()))
            .collect();
        assert_eq!(got, golden);
    }

    #[test]
    fn lossy_parse_skips_bad_lines_with_warnings() {
        let mut bytes = b".class Lcom/a/B;\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xfe, b'x', b'\n']);
        bytes.extend_from_slice(b"return-void\n");
        let (class, warnings) = parse_smali_lossy(&bytes).unwrap();
        assert_eq!(class.instructions.len(), 2);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].line, 2);
    }

    fn class_of(name: &str, lines: &[&str]) -> SmaliClass {
        let instructions = lines
            .iter()
            .filter_map(|l| normalize_instruction(l))
            .collect();
        SmaliClass::new(name.to_string(), instructions)
    }

    #[test]
    fn dedup_is_by_content_not_name() {
        let a = class_of("La;", &[".class La;", "return-void"]);
        let mut a2 = class_of("Lb;", &[".class La;", "return-void"]);
        a2.name = "Lb;".to_string();
        let out = dedup_classes(vec![a.clone(), a2]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].name, "La;");
        assert!(dedup_classes(vec![]).is_empty());
    }

    #[test]
    fn dedup_ten_class_fixture_against_pairwise_oracle() {
        // Ten classes, three of which exactly duplicate earlier bodies.
        let mut classes = Vec::new();
        for i in 0..7 {
            classes.push(class_of(
                &format!("Lc{i};"),
                &[".class Lc;", &format!("const/4 v0, {i:#x}"), "return-void"],
            ));
        }
        for (dup, src) in [(7, 0usize), (8, 3), (9, 5)] {
            let mut c = classes[src].clone();
            c.name = format!("Ldup{dup};");
            classes.push(c);
        }

        // Brute-force pairwise oracle: count classes with no earlier equal body.
        let mut survivors = 0;
        for i in 0..classes.len() {
            let dup_of_earlier = (0..i).any(|j| classes[j].instructions == classes[i].instructions);
            if !dup_of_earlier {
                survivors += 1;
            }
        }
        assert_eq!(survivors, 7);

        let deduped = dedup_classes(classes.clone());
        assert_eq!(deduped.len(), survivors);
        // Idempotence.
        assert_eq!(dedup_classes(deduped.clone()), deduped);
    }

    #[test]
    fn filter_api_calls_keeps_only_invokes() {
        let c = class_of(
            "La;",
            &[
                ".class La;",
                "const/4 v0, 0x0",
                "invoke-static {v0}, La;->f(I)V",
                ":l0",
                "invoke-virtual/range {v0 .. v5}, La;->g()V",
                "return-void",
            ],
        );
        let filtered = c.filter_api_calls();
        assert_eq!(filtered.instructions.len(), 2);
        assert!(filtered
            .instructions
            .iter()
            .all(|i| i.kind == InstructionKind::ApiCall));

        let empty = class_of("Lb;", &[".class Lb;", "return-void"]).filter_api_calls();
        assert!(empty.instructions.is_empty());
    }

    #[test]
    fn strip_debug_removes_debug_directives_only() {
        let c = class_of(
            "La;",
            &[
                ".class La;",
                ".locals 3",
                ".line 12",
                ".local v0, \"x\":I",
                ".end local v0",
                ".restart local v0",
                ".prologue",
                ".source \"A.java\"",
                "return-void",
            ],
        );
        let stripped = c.strip_debug();
        let texts: Vec<&str> = stripped.instructions.iter().map(|i| i.text.as_str()).collect();
        assert_eq!(texts, vec![".class La;", ".locals 3", "return-void"]);
    }

    #[test]
    fn stats_match_recomputation() {
        let corpus = Corpus::from_classes(vec![
            class_of("La;", &[".class La;", "invoke-static {}, La;->f()V"]),
            class_of("Lb;", &[".class Lb;", "return-void", "nop"]),
        ]);
        assert_eq!(corpus.stats().class_count, 2);
        assert_eq!(corpus.stats().instruction_count, 5);
        assert!((corpus.stats().api_fraction - 0.2).abs() < 1e-12);

        let api_only = corpus.filter_api_calls();
        assert_eq!(api_only.stats().instruction_count, 1);
        assert!((api_only.stats().api_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = Corpus::from_classes(vec![
            class_of("La;", &[".class La;", "invoke-static {}, La;->f()V"]),
            class_of("Lb;", &[".class Lb;", "const-string v0, \"a # b\""]),
        ]);
        write_corpus_jsonl(&corpus, &path).unwrap();
        let back = read_corpus_jsonl(&path).unwrap();
        assert_eq!(back.classes(), corpus.classes());
        assert_eq!(back.stats(), corpus.stats());
    }

    proptest! {
        #[test]
        fn normalize_is_a_fixpoint(raw in "[ -~]{0,60}") {
            if let Some(ins) = normalize_instruction(&raw) {
                prop_assert!(!ins.text.is_empty());
                prop_assert_eq!(ins.text.trim(), ins.text.as_str());
                prop_assert!(!ins.text.contains('\n'));
                let again = normalize_instruction(&ins.text).unwrap();
                prop_assert_eq!(again, ins);
            }
        }

        #[test]
        fn filtered_instructions_are_a_subsequence(
            lines in proptest::collection::vec("[a-z .:#\"-]{0,20}", 0..20)
        ) {
            let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            let mut all = vec![".class La;".to_string()];
            all.extend(refs.iter().filter_map(|l| normalize_instruction(l)).map(|i| i.text));
            let class = class_of("La;", &all.iter().map(String::as_str).collect::<Vec<_>>());
            let filtered = class.filter_api_calls();
            // Subsequence check.
            let mut it = class.instructions.iter();
            for want in &filtered.instructions {
                prop_assert!(it.any(|i| i == want));
            }
        }
    }
}
