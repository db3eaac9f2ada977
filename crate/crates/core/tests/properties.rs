use std::collections::{BTreeMap, BTreeSet, HashMap};

use codemem::evalharness::{aggregate, TaskRecord};
use codemem::metrics::{estimate_tokens, react_cost, ReactStep};
use codemem::registry::Registry;
use codemem::skillbank::{ExecutionEvidence, SkillBank, SkillDraft, ValidationRecord};
use codemem::todos::{TodoItem, TodoStatus, TodoStore};
use proptest::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

const CASES: u32 = 1000;

fn status() -> impl Strategy<Value = TodoStatus> {
    prop_oneof![
        Just(TodoStatus::Pending),
        Just(TodoStatus::InProgress),
        Just(TodoStatus::Completed)
    ]
}

fn rank(s: TodoStatus) -> u8 {
    match s {
        TodoStatus::Pending => 0,
        TodoStatus::InProgress => 1,
        TodoStatus::Completed => 2,
    }
}

const CONTENTS: [&str; 5] = ["plan", "fetch", "filter", "upload", "report"];

fn todo_list() -> impl Strategy<Value = Vec<TodoItem>> {
    prop::collection::vec((0..CONTENTS.len(), status()), 0..6).prop_map(|items| {
        items
            .into_iter()
            .map(|(i, s)| TodoItem::new(s, CONTENTS[i]))
            .collect()
    })
}

/// The transition rule restated from scratch.
fn acceptable(prev: &[TodoItem], next: &[TodoItem]) -> bool {
    let distinct: BTreeSet<&str> = next.iter().map(|i| i.content.as_str()).collect();
    if distinct.len() != next.len() {
        return false;
    }
    if next.iter().filter(|i| i.status == TodoStatus::InProgress).count() > 1 {
        return false;
    }
    next.iter().all(|n| {
        prev.iter()
            .find(|p| p.content == n.content)
            .is_none_or(|p| rank(n.status) >= rank(p.status))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn todo_status_never_moves_backward(writes in prop::collection::vec(todo_list(), 1..12)) {
        let store = TodoStore::in_memory();
        store.open_session("s");
        let mut model: Vec<TodoItem> = Vec::new();
        let mut revision = 0;
        let mut high_water: HashMap<String, u8> = HashMap::new();
        for proposed in writes {
            let expected_ok = acceptable(&model, &proposed);
            let result = store.write("s", proposed.clone());
            prop_assert_eq!(result.is_ok(), expected_ok, "{:?} -> {:?}", model, proposed);
            if expected_ok {
                model = proposed;
                revision += 1;
            }
            let current = store.get("s").unwrap();
            prop_assert_eq!(&current.items, &model);
            prop_assert_eq!(current.revision, revision);
            prop_assert!(current.items.iter().filter(|i| i.status == TodoStatus::InProgress).count() <= 1);
            // an item that is still listed never sits below the best status it held
            // while it stayed on the list
            let listed: BTreeSet<&str> = current.items.iter().map(|i| i.content.as_str()).collect();
            high_water.retain(|c, _| listed.contains(c.as_str()));
            for item in &current.items {
                let best = high_water.entry(item.content.clone()).or_insert(rank(item.status));
                prop_assert!(rank(item.status) >= *best);
                *best = rank(item.status);
            }
        }
    }
}

fn skill_source() -> impl Strategy<Value = String> {
    ("[a-z ]{0,20}", 0u32..1000, prop::option::of("[\\x20-\\x7e\u{e9}\u{2713}]{0,30}")).prop_map(|(doc, n, tail)| {
        let mut s = format!("async def agent_main(days_back=15):\n    # {doc}\n    return {n}\n");
        if let Some(t) = tail {
            s.push_str(&format!("# {t}\n"));
        }
        s
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn skill_hashes_survive_restart(
        drafts in prop::collection::vec((prop::sample::select(vec!["bridge", "report", "sync_v2"]), skill_source()), 1..5)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut expected: BTreeMap<(String, u32), (String, String)> = BTreeMap::new();
        {
            let bank = SkillBank::open(dir.path()).unwrap();
            for (i, (name, source)) in drafts.iter().enumerate() {
                let validation = ValidationRecord {
                    session_id: "s".into(),
                    execution_id: format!("exec-{i}"),
                    user_confirmed: true,
                };
                let evidence = ExecutionEvidence {
                    session_id: "s".into(),
                    execution_id: format!("exec-{i}"),
                    succeeded: true,
                };
                let draft = SkillDraft {
                    name: name.to_string(),
                    description: String::new(),
                    source: source.clone(),
                    entrypoint: "agent_main".into(),
                    signature: "days_back=15".into(),
                    required_tools: vec![],
                };
                let skill = bank.register(draft, validation, Some(&evidence), |_| true).unwrap();
                let hash = hex::encode(Sha256::digest(source.as_bytes()));
                prop_assert_eq!(&skill.content_hash, &hash);
                expected.insert((name.to_string(), skill.version), (source.clone(), hash));
            }
        }
        let reopened = SkillBank::open(dir.path()).unwrap();
        for ((name, version), (source, hash)) in &expected {
            let skill = reopened.get(name, Some(*version)).unwrap();
            prop_assert_eq!(&skill.source, source);
            prop_assert_eq!(&skill.content_hash, hash);
        }
        let stored: usize = reopened.list().iter().map(|s| s.version as usize).sum();
        prop_assert_eq!(stored, expected.len());
    }
}

const WORDS: [&str; 8] = ["email", "fetch", "upload", "file", "drive", "calendar", "invoice", "sheet"];

fn word() -> impl Strategy<Value = &'static str> {
    prop::sample::select(WORDS.to_vec())
}

#[derive(Debug, Clone)]
struct Tool {
    name: String,
    tags: Vec<String>,
    summary: String,
}

fn tool() -> impl Strategy<Value = Tool> {
    (
        prop::collection::vec(word(), 1..3),
        "[a-z]{0,3}",
        prop::collection::vec(word().prop_map(|w| if w.len() % 2 == 0 { w.to_uppercase() } else { w.to_string() }), 0..3),
        prop::collection::vec(word(), 0..5),
    )
        .prop_map(|(parts, salt, tags, summary)| Tool {
            name: format!("{}{}__{}", parts[0], salt, parts[1..].join("_")).trim_end_matches("__").to_string(),
            tags,
            summary: summary.join(", "),
        })
}

fn brute_tokens(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.insert(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.insert(current);
    }
    out
}

fn brute_search(tools: &[Tool], query: &str, k: usize) -> Vec<(String, usize)> {
    let q = brute_tokens(query);
    let mut scored: Vec<(String, usize)> = tools
        .iter()
        .map(|t| {
            let tags: BTreeSet<String> = t.tags.iter().map(|x| x.to_lowercase()).collect();
            let score = 3 * brute_tokens(&t.name).intersection(&q).count()
                + 2 * tags.intersection(&q).count()
                + brute_tokens(&t.summary).intersection(&q).count();
            (t.name.clone(), score)
        })
        .filter(|(_, s)| *s > 0)
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn manifest(tools: &[Tool]) -> String {
    json!({"tools": tools.iter().map(|t| json!({"name": t.name, "summary": t.summary, "tags": t.tags})).collect::<Vec<_>>()})
        .to_string()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn search_is_a_pure_ranking(
        tools in prop::collection::vec(tool(), 1..25)
            .prop_map(|ts| {
                let mut seen = BTreeSet::new();
                ts.into_iter().filter(|t| seen.insert(t.name.clone())).collect::<Vec<_>>()
            })
            .prop_shuffle(),
        query in prop::collection::vec(prop_oneof![word().prop_map(str::to_string), "[A-Za-z]{1,5}"], 0..4)
            .prop_map(|ws| ws.join(" ,")),
        k in 1usize..8,
        split in 0usize..25,
    ) {
        let registry = Registry::new();
        registry.import_manifest(&manifest(&tools)).unwrap();
        let got: Vec<(String, usize)> = registry.search(&query, k).unwrap().into_iter().map(|h| (h.name, h.score)).collect();
        prop_assert_eq!(&got, &brute_search(&tools, &query, k));
        let again: Vec<(String, usize)> = registry.search(&query, k).unwrap().into_iter().map(|h| (h.name, h.score)).collect();
        prop_assert_eq!(&got, &again);

        // import order and batching do not matter
        let split = split.min(tools.len());
        let other = Registry::new();
        let (a, b) = tools.split_at(split);
        for part in [b, a] {
            if !part.is_empty() {
                other.import_manifest(&manifest(part)).unwrap();
            }
        }
        let reordered: Vec<(String, usize)> = other.search(&query, k).unwrap().into_iter().map(|h| (h.name, h.score)).collect();
        prop_assert_eq!(&got, &reordered);
    }

    #[test]
    fn react_cost_grows_with_every_step(
        s_prompt in 0u64..500,
        steps in prop::collection::vec(("[a-z ]{0,40}", "[a-z ]{0,80}"), 0..10),
        extra in ("[a-z ]{0,40}", "[a-z ]{0,80}"),
    ) {
        let as_steps = |v: &[(String, String)]| -> Vec<ReactStep> {
            v.iter().map(|(a, o)| ReactStep { action: a.clone(), output: o.clone() }).collect()
        };
        let base = react_cost(s_prompt, &as_steps(&steps), &estimate_tokens);
        let mut longer = steps.clone();
        longer.push(extra.clone());
        let grown = react_cost(s_prompt, &as_steps(&longer), &estimate_tokens);
        let history: u64 = steps.iter().map(|(a, o)| estimate_tokens(a) + estimate_tokens(o)).sum();
        prop_assert_eq!(grown.total, base.total + s_prompt + history + estimate_tokens(&extra.1));
        prop_assert!(grown.total >= base.total);
        prop_assert!(base.total >= s_prompt * steps.len() as u64);
    }
}

fn grid() -> impl Strategy<Value = Vec<TaskRecord>> {
    (1usize..6, 1u32..4, 1usize..3).prop_flat_map(|(tasks, runs, labels)| {
        let cells = tasks * runs as usize * labels;
        prop::collection::vec((any::<bool>(), 0u64..20, 0u32..10_000, 0u64..5000), cells).prop_map(move |values| {
            let mut out = Vec::new();
            let mut it = values.into_iter();
            for l in 0..labels {
                for t in 0..tasks {
                    for r in 0..runs {
                        let (passed, calls, wall, tokens) = it.next().unwrap();
                        out.push(TaskRecord {
                            label: format!("m{l}"),
                            task_id: format!("t{t}"),
                            run_index: r,
                            passed,
                            assistant_calls: calls,
                            wall_time: wall as f64 / 100.0,
                            total_tokens: tokens,
                            detail: None,
                            session_id: None,
                            trajectory: None,
                        });
                    }
                }
            }
            out
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn aggregation_ignores_record_order(
        (records, shuffled) in grid().prop_flat_map(|g| (Just(g.clone()), Just(g).prop_shuffle()))
    ) {
        let rows = aggregate(&records).unwrap();
        prop_assert_eq!(&rows, &aggregate(&shuffled).unwrap());
        for row in &rows {
            let mine: Vec<&TaskRecord> = records.iter().filter(|r| r.label == row.label).collect();
            let runs: BTreeSet<u32> = mine.iter().map(|r| r.run_index).collect();
            let tasks: BTreeSet<&str> = mine.iter().map(|r| r.task_id.as_str()).collect();
            let worst = runs
                .iter()
                .map(|run| mine.iter().filter(|r| r.run_index == *run && r.passed).count())
                .min()
                .unwrap();
            prop_assert_eq!(row.correctness_min, 100.0 * worst as f64 / tasks.len() as f64);
            let mut walls: Vec<f64> = mine.iter().map(|r| r.wall_time).collect();
            walls.sort_by(f64::total_cmp);
            prop_assert_eq!(row.p50_latency, walls[(walls.len() - 1) / 2]);
            prop_assert_eq!(row.total_tokens, mine.iter().map(|r| r.total_tokens).sum::<u64>());
        }
    }
}
