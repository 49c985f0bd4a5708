//! A small, fully scripted experiment: synthetic essays, a split manifest,
//! scripted completions for every strategy kind and the analytic
//! re-generation step, and a config tying them together. Used by the test
//! suites and the guide; everything is derived from essay indices, so the
//! files are identical on every call.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::llm::ScriptedFixture;
use crate::rubric::{BandScore, Criterion, CriterionSet};

/// Topic of the first test essay, whose scripted criterion answers are
/// (6.5, 6.5, 6.0, 6.5) against a gold band of 6.5.
pub const CASE_STUDY_TOPIC: &str = "Technology & Education";
pub const CASE_STUDY_ID: &str = "syn-test-000";

const TOPICS: [(&str, &str, &[&str]); 6] = [
    (
        CASE_STUDY_TOPIC,
        "Some people believe that technology has made learning easier for students, while others think it has made students lazy. Discuss both views and give your opinion.",
        &["online courses", "tablets", "search engines", "teachers", "homework", "attention"],
    ),
    (
        "Environment",
        "Many people think that protecting the environment is the responsibility of governments rather than individuals. To what extent do you agree or disagree?",
        &["recycling", "pollution", "public transport", "carbon taxes", "forests", "households"],
    ),
    (
        "Health",
        "In many countries people are living longer than ever before. What problems does this cause and what solutions can you suggest?",
        &["pensions", "hospitals", "retirement", "exercise", "care homes", "families"],
    ),
    (
        "Work",
        "Some people prefer to work for a large company, while others prefer a small business. Discuss the advantages of both and give your opinion.",
        &["salaries", "promotion", "teamwork", "job security", "managers", "flexibility"],
    ),
    (
        "Cities",
        "The growth of large cities has created serious traffic congestion. What are the causes and what measures could reduce it?",
        &["commuters", "road tolls", "cycling lanes", "suburbs", "buses", "parking"],
    ),
    (
        "Media",
        "News on television and the internet focuses too much on negative events. Why is this the case and is it a positive or negative development?",
        &["headlines", "advertising", "journalists", "social media", "viewers", "crime"],
    ),
];

fn band(steps: u8) -> BandScore {
    BandScore::from_half_steps(steps.min(18)).expect("clamped")
}

/// Gold overall band of essay `i`, between 4.0 and 8.5.
fn gold_steps(i: usize) -> u8 {
    8 + ((i * 7) % 10) as u8
}

/// Analytic bands whose mean is exactly the overall band.
fn gold_criteria(i: usize) -> CriterionSet {
    let o = gold_steps(i);
    let spread = if i % 3 == 0 { 0 } else { 1 };
    CriterionSet::new(band(o), band(o + spread), band(o - spread), band(o))
}

fn essay_text(id: &str, topic: usize, i: usize) -> String {
    let words = TOPICS[topic].2;
    let mut text = format!("Reference {id}.");
    for s in 0..6 {
        let a = words[(i + s) % words.len()];
        let b = words[(i + 2 * s + 1) % words.len()];
        let _ = write!(text, " In my view {a} and {b} shape this issue in sentence {s}.");
    }
    text
}

fn essay_record(id: &str, i: usize, topic: usize) -> serde_json::Value {
    json!({
        "id": id,
        "prompt": TOPICS[topic].1,
        "essay": essay_text(id, topic, i),
        "band": BandScore::from_half_steps(gold_steps(i)).expect("in range").value(),
    })
}

fn fixture(pattern: String, completion: String) -> ScriptedFixture {
    ScriptedFixture { fingerprint: None, prompt_regex: Some(pattern), completion, usage: None }
}

fn jsonl(fixtures: &[ScriptedFixture]) -> String {
    fixtures.iter().map(|f| serde_json::to_string(f).expect("fixtures serialize") + "\n").collect()
}

/// Final-band answer: mostly gold, some off by half a band or one band, and
/// one unusable reply.
fn final_band_reply(i: usize) -> String {
    if UNPARSEABLE_FINAL_BAND.contains(&i) {
        return "I am unable to grade this essay.".into();
    }
    if i == 0 {
        return "Band: 6.0".into();
    }
    let gold = gold_steps(i);
    let steps = if i % 7 == 3 {
        gold - 2
    } else if i % 5 == 1 {
        gold + 1
    } else {
        gold
    };
    format!("Band: {}", band(steps))
}

fn criterion_reply(i: usize) -> CriterionSet {
    if i == 0 {
        return CriterionSet::from_values(6.5, 6.5, 6.0, 6.5).expect("admissible");
    }
    let g = gold_criteria(i);
    let shift = |c: Criterion, by: i8| band((g.get(c).half_steps() as i8 + by) as u8);
    match i % 4 {
        1 => CriterionSet::new(shift(Criterion::TaskResponse, 1), g.cc, g.lr, g.gra),
        2 => CriterionSet::new(g.tr, g.cc, shift(Criterion::LexicalResource, -1), g.gra),
        _ => g,
    }
}

fn comment(criterion: Criterion, i: usize) -> String {
    format!("{} comment for essay {i}.", criterion.full_name())
}

/// Joint answers. Without comments they also lean half a band high on two
/// criteria for every fourth essay, enough to move the rounded overall.
fn joint_reply(i: usize, with_comments: bool) -> String {
    let mut c = criterion_reply(i);
    if !with_comments && i % 4 == 1 {
        c = CriterionSet::new(band(c.tr.half_steps() + 1), band(c.cc.half_steps() + 1), c.lr, c.gra);
    }
    let mut value = json!({
        "TR_Band": c.tr.value(), "CC_Band": c.cc.value(), "LR_Band": c.lr.value(), "GRA_Band": c.gra.value(),
    });
    if with_comments {
        for criterion in Criterion::ALL {
            value[format!("{}_Comment", criterion.tag())] = json!(comment(criterion, i));
        }
    }
    value.to_string()
}

fn single_reply(i: usize, criterion: Criterion) -> String {
    let band = criterion_reply(i).get(criterion).value();
    json!({"score": band, "comment": comment(criterion, i)}).to_string()
}

/// Re-generation answers: valid, mean-violating or malformed by index.
fn regen_reply(i: usize) -> String {
    let g = gold_criteria(i);
    let bands = match i % 6 {
        4 => return "{\"Task_Response\": {\"Band\": 6.0,".into(),
        5 => [g.tr.value() + 1.0, g.cc.value() + 1.0, g.lr.value() + 1.0, g.gra.value()].map(|b| b.min(9.0)),
        _ => [g.tr.value(), g.cc.value(), g.lr.value(), g.gra.value()],
    };
    let section = |b: f64, c: &str| json!({"Band": b, "Comment": c});
    json!({
        "Task_Response": section(bands[0], "Addresses the task."),
        "Coherence_and_Cohesion": section(bands[1], "Clear progression."),
        "Lexical_Resource": {"Band": bands[2], "Mistakes": ["good grade"], "Corrections": ["high grade"], "Comment": "Adequate range."},
        "Grammatical_Range_and_Accuracy": {"Band": bands[3], "Mistakes": [], "Corrections": [], "Comment": "Mostly accurate."},
        "Overall_Band_Score": BandScore::from_half_steps(gold_steps(i)).expect("in range").value(),
        "General_Feedback": "Solid response.",
    })
    .to_string()
}

/// Which test essay indices the scripted final-band backend cannot parse.
pub const UNPARSEABLE_FINAL_BAND: [usize; 1] = [13];

/// Writes a scripted experiment under `dir` and returns the config path.
///
/// Files: `data/essays.jsonl`, `data/splits.csv`, `fixtures/*.jsonl` and
/// `experiment.json` with four strategies, one scripted backend each.
pub fn write_demo_experiment(dir: &Path, n_train: usize, n_test: usize) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir.join("data"))?;
    std::fs::create_dir_all(dir.join("fixtures"))?;
    let mut essays = String::new();
    let mut splits = String::from("id,split\n");
    let mut regen = Vec::new();
    for i in 0..n_train {
        let id = format!("syn-train-{i:03}");
        essays.push_str(&essay_record(&id, i + 100, i % TOPICS.len()).to_string());
        essays.push('\n');
        let _ = writeln!(splits, "{id},train");
        regen.push(fixture(format!(r"Essay: Reference {id}\."), regen_reply(i + 100)));
    }
    let (mut final_band, mut joint, mut rag, mut sft) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n_test {
        let id = format!("syn-test-{i:03}");
        let topic = if i == 0 { 0 } else { i % TOPICS.len() };
        let mut record = essay_record(&id, i, topic);
        if i == 0 {
            record["band"] = json!(6.5);
        }
        essays.push_str(&record.to_string());
        essays.push('\n');
        let _ = writeln!(splits, "{id},test");
        let marker = format!(r"Reference {id}\.");
        final_band.push(fixture(format!(r"ESSAY TO EVALUATE:\n[\s\S]*{marker}"), final_band_reply(i)));
        joint.push(fixture(format!(r"NEW ESSAY TO GRADE:\n[\s\S]*{marker}"), joint_reply(i, false)));
        sft.push(fixture(format!(r"NEW ESSAY TO GRADE:\n[\s\S]*{marker}"), joint_reply(i, true)));
        for criterion in Criterion::ALL {
            let heading = regex::escape(&format!("criterion {} ({})", criterion.full_name(), criterion.tag()));
            rag.push(fixture(format!(r"{heading}[\s\S]*Essay: {marker}"), single_reply(i, criterion)));
        }
    }
    std::fs::write(dir.join("data/essays.jsonl"), essays)?;
    std::fs::write(dir.join("data/splits.csv"), splits)?;
    for (name, fixtures) in
        [("final", &final_band), ("joint", &joint), ("rag", &rag), ("sft", &sft), ("regen", &regen)]
    {
        std::fs::write(dir.join(format!("fixtures/{name}.jsonl")), jsonl(fixtures))?;
    }
    let backend = |name: &str| {
        json!({
            "name": format!("mock-{name}"),
            "kind": "scripted",
            "model": format!("scripted-{name}"),
            "fixtures": format!("fixtures/{name}.jsonl"),
            "pricing": {"prompt_per_1k": 0.001, "output_per_1k": 0.002},
        })
    };
    let backends: Vec<_> = ["final", "joint", "rag", "sft", "regen"].map(backend).into();
    let config = json!({
        "dataset": {"primary": "data/essays.jsonl", "manifest": "data/splits.csv"},
        "backends": backends,
        "strategies": [
            {"name": "final-band", "kind": "final-band-prompting", "backend": "mock-final",
             "labels": {"approach": "A2", "model": "scripted", "scheme": "Final-band prompting"}},
            {"name": "criterion-joint", "kind": "criterion-joint", "backend": "mock-joint",
             "labels": {"approach": "A3", "model": "scripted", "scheme": "Joint criterion prompting"}},
            {"name": "criterion-rag", "kind": "criterion-rag", "backend": "mock-rag",
             "labels": {"approach": "A3 + RAG", "model": "scripted (4 adapters)", "scheme": "k-Instruction Tuning + RAG"}},
            {"name": "sft-dpo-rag", "kind": "sft-dpo-rag", "backend": "mock-sft",
             "labels": {"approach": "SFT + DPO + RAG", "model": "scripted", "scheme": "SFT + DPO + RAG"}},
        ],
        "concurrency": 4,
        "seed": 7,
        "case_study": [{"id": CASE_STUDY_ID, "topic": CASE_STUDY_TOPIC}],
        "regen": {"backend": "mock-regen"},
    });
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).expect("config serializes") + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rubric::{overall_from_criteria, RoundingRule};

    #[test]
    fn gold_criteria_average_to_gold() {
        for i in 0..200 {
            let agg = overall_from_criteria(&gold_criteria(i), RoundingRule::default());
            assert_eq!(agg.overall.half_steps(), gold_steps(i), "essay {i}");
        }
    }

    #[test]
    fn files_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_demo_experiment(a.path(), 12, 10).unwrap();
        write_demo_experiment(b.path(), 12, 10).unwrap();
        for file in ["data/essays.jsonl", "data/splits.csv", "fixtures/rag.jsonl", "experiment.json"] {
            assert_eq!(
                std::fs::read(a.path().join(file)).unwrap(),
                std::fs::read(b.path().join(file)).unwrap()
            );
        }
    }
}
