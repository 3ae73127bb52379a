//! Deterministic generator of labeled toy corpora.
//!
//! Each family owns a package, API classes, method names, string motifs and
//! a handful of fixed line routines built from them. A generated class is a
//! structural frame around routine instances, so instruction adjacency and
//! masked tokens follow family-level patterns while per-class words (class
//! name, field name, string suffixes) keep every class body distinct.
//! Identifier pools are drawn from a seeded stream with cross-family
//! collision checks, so families stay disjoint in their motif tokens.
//! Roughly a sixth of the lines are API calls and every class carries at
//! least two invokes, so API-only filtering never empties a class.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub families: usize,
    pub classes_per_family: usize,
    pub instructions_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            families: 2,
            classes_per_family: 100,
            instructions_per_class: 30,
            seed: 0,
        }
    }
}

/// One generated class with its family label.
#[derive(Clone, Debug)]
pub struct SynthClass {
    pub name: String,
    pub smali: String,
    pub family: usize,
}

/// One line of a routine, instantiated per class.
#[derive(Clone, Debug)]
enum LinePattern {
    Const4 { value: u8 },
    ConstString { motif: usize, second: usize },
    Invoke { api: usize, method: usize },
    StaticGet { api: usize, field: usize },
    StaticPut { api: usize, field: usize },
    AddInt,
}

struct FamilyPool {
    package: String,
    api_classes: Vec<String>,
    api_methods: Vec<String>,
    string_motifs: Vec<String>,
    field_words: Vec<String>,
    method_word: String,
    routines: Vec<Vec<LinePattern>>,
}

fn make_word(rng: &mut ChaCha20Rng, syllables: usize) -> String {
    const CONSONANTS: &[u8] = b"bcdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut word = String::new();
    for _ in 0..syllables {
        word.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        word.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    word
}

fn fresh_word(rng: &mut ChaCha20Rng, syllables: usize, used: &mut HashSet<String>) -> String {
    loop {
        let word = make_word(rng, syllables);
        if used.insert(word.clone()) {
            return word;
        }
    }
}

fn family_pool(spec: &SynthSpec, family: usize, used: &mut HashSet<String>) -> FamilyPool {
    let mut rng = rng_from_seed(derive_seed(spec.seed, &format!("family-{family}")));
    let package = fresh_word(&mut rng, 3, used);
    let api_classes: Vec<String> = (0..6)
        .map(|_| {
            let w = fresh_word(&mut rng, 3, used);
            let mut c = w.clone();
            c[..1].make_ascii_uppercase();
            used.insert(c.clone());
            c
        })
        .collect();
    let api_methods: Vec<String> = (0..12).map(|_| fresh_word(&mut rng, 2, used)).collect();
    let string_motifs: Vec<String> = (0..8).map(|_| fresh_word(&mut rng, 3, used)).collect();
    let field_words: Vec<String> = (0..4).map(|_| fresh_word(&mut rng, 2, used)).collect();
    let method_word = fresh_word(&mut rng, 2, used);

    // Four fixed routines of six-or-seven lines; one or two invokes per
    // routine keep the API fraction near a sixth of the body. Body lines
    // draw only on the family inventory, so every token of a routine line
    // is recoverable from its template.
    let routines = (0..4)
        .map(|_| {
            let mut lines = vec![
                LinePattern::Const4 {
                    value: rng.gen_range(0..8),
                },
                LinePattern::ConstString {
                    motif: rng.gen_range(0..string_motifs.len()),
                    second: rng.gen_range(0..string_motifs.len()),
                },
                LinePattern::Invoke {
                    api: rng.gen_range(0..api_classes.len()),
                    method: rng.gen_range(0..api_methods.len()),
                },
                if rng.gen_range(0..2) == 0 {
                    LinePattern::StaticGet {
                        api: rng.gen_range(0..api_classes.len()),
                        field: rng.gen_range(0..field_words.len()),
                    }
                } else {
                    LinePattern::StaticPut {
                        api: rng.gen_range(0..api_classes.len()),
                        field: rng.gen_range(0..field_words.len()),
                    }
                },
                LinePattern::AddInt,
                if rng.gen_range(0..2) == 0 {
                    LinePattern::ConstString {
                        motif: rng.gen_range(0..string_motifs.len()),
                        second: rng.gen_range(0..string_motifs.len()),
                    }
                } else {
                    LinePattern::Const4 {
                        value: rng.gen_range(0..8),
                    }
                },
            ];
            // A second invoke in some routines varies the call density.
            if rng.gen_range(0..2) == 0 {
                lines.push(LinePattern::Invoke {
                    api: rng.gen_range(0..api_classes.len()),
                    method: rng.gen_range(0..api_methods.len()),
                });
            }
            lines
        })
        .collect();

    FamilyPool {
        package,
        api_classes,
        api_methods,
        string_motifs,
        field_words,
        method_word,
        routines,
    }
}

fn render_line(pattern: &LinePattern, reg: usize, pool: &FamilyPool) -> String {
    match pattern {
        LinePattern::Const4 { value } => format!("    const/4 v{reg}, {value:#x}"),
        LinePattern::ConstString { motif, second } => format!(
            "    const-string v{reg}, \"{} {}\"",
            pool.string_motifs[*motif], pool.string_motifs[*second]
        ),
        LinePattern::Invoke { api, method } => format!(
            "    invoke-static {{v{reg}}}, Lsynth/{}/{};->{}(I)V",
            pool.package, pool.api_classes[*api], pool.api_methods[*method]
        ),
        LinePattern::StaticGet { api, field } => format!(
            "    sget v{reg}, Lsynth/{}/{};->{}:I",
            pool.package, pool.api_classes[*api], pool.field_words[*field]
        ),
        LinePattern::StaticPut { api, field } => format!(
            "    sput v{reg}, Lsynth/{}/{};->{}:I",
            pool.package, pool.api_classes[*api], pool.field_words[*field]
        ),
        LinePattern::AddInt => format!("    add-int/lit8 v{reg}, v{reg}, 0x1"),
    }
}

/// Generate the corpus: shuffled classes plus family labels.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<SynthClass>> {
    if spec.families < 2 {
        return Err(Error::ConfigMismatch(format!(
            "need at least two families, got {}",
            spec.families
        )));
    }
    if spec.instructions_per_class < 12 {
        return Err(Error::ConfigMismatch(
            "need at least 12 instructions per class".into(),
        ));
    }
    let mut used = HashSet::new();
    let pools: Vec<FamilyPool> = (0..spec.families)
        .map(|f| family_pool(spec, f, &mut used))
        .collect();

    let mut out = Vec::with_capacity(spec.families * spec.classes_per_family);
    for (family, pool) in pools.iter().enumerate() {
        for index in 0..spec.classes_per_family {
            let mut rng = rng_from_seed(derive_seed(
                spec.seed,
                &format!("class-{family}-{index}"),
            ));
            let mut class_word = fresh_word(&mut rng, 3, &mut used);
            class_word[..1].make_ascii_uppercase();
            let class_name = format!("Lsynth/{}/{class_word}{index};", pool.package);

            // Structural frame: 3 header lines plus one method frame of 4.
            // The class-unique word appears only in the header, so nearly
            // every body token follows a family-level pattern.
            let mut text = String::new();
            let _ = writeln!(text, ".class public {class_name}");
            let _ = writeln!(text, ".super Ljava/lang/Object;");
            let _ = writeln!(text, ".field private {}:I", pool.field_words[0]);
            let _ = writeln!(text);
            let _ = writeln!(text, ".method public {}{index}()V", pool.method_word);
            let _ = writeln!(text, "    .registers {}", rng.gen_range(3..7));

            let body_budget = spec.instructions_per_class - 7;
            let mut body: Vec<String> = Vec::with_capacity(body_budget);
            let mut invokes = 0usize;
            while body.len() < body_budget {
                let routine = &pool.routines[rng.gen_range(0..pool.routines.len())];
                let reg = rng.gen_range(0..3);
                for pattern in routine {
                    if body.len() >= body_budget {
                        break;
                    }
                    if matches!(pattern, LinePattern::Invoke { .. }) {
                        invokes += 1;
                    }
                    body.push(render_line(pattern, reg, pool));
                }
            }
            if invokes < 2 {
                // Guarantee API-only mode keeps at least two lines.
                let routine = &pool.routines[0];
                if let Some(pattern) = routine
                    .iter()
                    .find(|p| matches!(p, LinePattern::Invoke { .. }))
                {
                    body[0] = render_line(pattern, 0, pool);
                    let last = body.len() - 1;
                    body[last] = render_line(pattern, 1, pool);
                }
            }
            for line in &body {
                let _ = writeln!(text, "{line}");
            }
            let _ = writeln!(text, "    return-void");
            let _ = writeln!(text, ".end method");

            out.push(SynthClass {
                name: class_name,
                smali: text,
                family,
            });
        }
    }

    // Interleave families so corpus order carries no label signal.
    let mut rng = rng_from_seed(derive_seed(spec.seed, "shuffle"));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Write `classes/NNNN.smali` files and `labels.csv` under `dir`.
pub fn write_synth_corpus(dir: &Path, classes: &[SynthClass]) -> Result<(PathBuf, PathBuf)> {
    let classes_dir = dir.join("classes");
    fs::create_dir_all(&classes_dir)?;
    let mut labels = Vec::with_capacity(classes.len());
    for (i, class) in classes.iter().enumerate() {
        fs::write(classes_dir.join(format!("{i:05}.smali")), &class.smali)?;
        labels.push((class.name.clone(), class.family));
    }
    let labels_path = dir.join("labels.csv");
    crate::tasks::write_labels_csv(&labels_path, &labels)?;
    Ok((classes_dir, labels_path))
}
