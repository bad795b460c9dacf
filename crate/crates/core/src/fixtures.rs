//! Small sample graphs shared by tests, examples and the mock experiment.

use crate::kg::{KnowledgeGraph, Triplet};

/// Shorthand for a valid triplet. Panics on empty labels.
pub fn t(subject: &str, relation: &str, object: &str) -> Triplet {
    Triplet::new(subject, relation, object).expect("fixture triplet")
}

/// The five-edge Harry Potter graph.
///
/// ```text
/// e1 (Harry Potter, school, Hogwarts)          seed
/// e2 (Harry Potter, house, Gryffindor)
/// e3 (Gryffindor, belongs to, Hogwarts)
/// e4 (Harry Potter, classmate, Hermione Granger)
/// e5 (Hermione Granger, school, Hogwarts)
/// ```
///
/// Minerva McGonagall is present as an isolated entity.
pub fn hp_mini() -> KnowledgeGraph {
    let seed = t("Harry Potter", "school", "Hogwarts");
    let mut graph = KnowledgeGraph::with_edges(
        "hp-mini",
        seed.clone(),
        [
            seed,
            t("Harry Potter", "house", "Gryffindor"),
            t("Gryffindor", "belongs to", "Hogwarts"),
            t("Harry Potter", "classmate", "Hermione Granger"),
            t("Hermione Granger", "school", "Hogwarts"),
        ],
    )
    .expect("hp-mini is valid");
    graph.insert_entity("Minerva McGonagall").expect("valid label");
    graph
}

/// hp-mini plus (Draco Malfoy, house, Slytherin): what the scripted model knows.
pub fn hp_truth() -> KnowledgeGraph {
    let mut graph = hp_mini();
    graph
        .insert_edge(t("Draco Malfoy", "house", "Slytherin"))
        .expect("no conflicting link");
    graph
}

/// The reasoning trace the scripted model gives for the seed question.
pub const HP_COT: &str = "Harry Potter studied at Hogwarts School of Witchcraft and Wizardry. \
He was sorted into the Gryffindor house. Gryffindor is one of the four houses of Hogwarts. \
Harry Potter's education is covered in the series. So the answer is Hogwarts.";

/// Refined question the scripted model answers for the `studied at` fact.
pub const HP_REFINED_QUERY: &str = "Where did Harry Potter go to school?";

/// Model for scripted construction sessions around hp-mini.
///
/// The seed question gets [`HP_COT`], whose sentences extract to four
/// candidates; every other reasoning prompt gets a reply too short to use.
/// Tagged questions are answered from [`hp_truth`].
pub fn hp_session_endpoint() -> crate::probe::ScriptedEndpoint {
    let truth = crate::probe::MockResponder::new(&hp_truth(), 0.0, 0).expect("noise in range");
    crate::probe::ScriptedEndpoint::new()
        .with_rule("Question: Where did Harry Potter study?", [HP_COT])
        .with_rule("Reason step by step", ["Nothing more."])
        .with_rule(
            "Sentence: Harry Potter studied at Hogwarts",
            ["(Harry Potter, studied at, Hogwarts)"],
        )
        .with_rule("Sentence: He was sorted into", ["(Harry Potter, house, Gryffindor)"])
        .with_rule("Sentence: Gryffindor is one of", ["(Gryffindor, belongs to, Hogwarts)"])
        .with_rule(
            "Sentence: Harry Potter's education",
            ["(Harry Potter's education, covered in, series)"],
        )
        .with_rule("Sentence: So the answer", ["(answer, is, Hogwarts)"])
        .with_rule(HP_REFINED_QUERY, ["Hogwarts, of course."])
        .with_fallback(std::sync::Arc::new(truth))
}

/// Reference chain counts per length 1..=5.
pub const BENCHMARK_CHAIN_COUNTS: [usize; 5] = [21, 75, 102, 159, 201];

/// Bundle with one graph per seed whose enumerated chains have exactly
/// `counts[l - 1]` chains of length `l`, spread evenly over the graphs.
///
/// Each graph holds its seed edge plus disjoint detours from subject to
/// object, so every detour is the only path through its nodes. Needs one
/// graph per length-1 chain.
pub fn shaped_bundle(seeds: &[Triplet], counts: [usize; 5]) -> crate::dataset::DatasetBundle {
    assert_eq!(seeds.len(), counts[0], "one seed per direct chain");
    let config = crate::pipeline::PipelineConfig::default();
    let mut graphs = Vec::new();
    let mut chains = Vec::new();
    for (g, seed) in seeds.iter().enumerate() {
        let id = format!("seed-{:02}", g + 1);
        let mut edges = vec![seed.clone()];
        for len in 2..=5 {
            let share = counts[len - 1] / seeds.len() + usize::from(g < counts[len - 1] % seeds.len());
            for k in 0..share {
                let mut nodes = vec![seed.subject().to_string()];
                nodes.extend((1..len).map(|j| format!("{} via {len}.{k}.{j}", seed.subject())));
                nodes.push(seed.object().to_string());
                for (j, pair) in nodes.windows(2).enumerate() {
                    edges.push(t(&pair[0], &format!("step {}", j + 1), &pair[1]));
                }
            }
        }
        let graph = KnowledgeGraph::with_edges(&id, seed.clone(), edges).expect("detours are disjoint");
        chains.extend(crate::pipeline::sequence_chains(&graph, &config).expect("chains"));
        graphs.push(graph);
    }
    crate::dataset::DatasetBundle {
        version: crate::dataset::FORMAT_VERSION.to_string(),
        graphs,
        chains,
    }
}
