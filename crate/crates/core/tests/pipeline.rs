use structlm::checkpoint::Checkpoint;
use structlm::eval::{
    corpus_pppl, delta_report, induce_trees, minimal_pairs_accuracy, parse_gold_trees, read_reports, write_reports,
    EvalReport, Metric, MinimalPair,
};
use structlm::model::{ModelConfig, Variant};
use structlm::pretrain::{train_loop, TrainConfig};
use structlm::tokenizer::train_bpe;

fn corpus() -> Vec<String> {
    let subjects = ["the dog", "the dogs", "a bird", "the birds", "my friend", "my friends"];
    let rest = ["near the gate", "by the lake", "in the yard"];
    let mut out = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        for r in rest {
            let verb = if i % 2 == 0 { "sings" } else { "sing" };
            out.push(format!("{s} {r} {verb} ."));
        }
    }
    out
}

#[test]
fn train_then_evaluate_every_task() {
    let lines = corpus();
    let tok = train_bpe(&lines, 300).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { batch_size: 6, seq_len: 16, lr_peak: 2e-3, max_steps: 12, checkpoint_every: 5, ..TrainConfig::default() };
    let mut reports = Vec::new();
    for variant in [Variant::Vanilla, Variant::S1] {
        let out = dir.path().join(variant.name());
        let outcome = train_loop(&lines, &tok, &ModelConfig::tiny(variant, tok.vocab_size()), &cfg, &out).unwrap();
        assert_eq!(outcome.metrics.len(), 12);
        assert!(out.join("step-5.ckpt").exists() && out.join("step-10.ckpt").exists());
        let model = Checkpoint::load(&outcome.final_checkpoint).unwrap().model;
        assert_eq!(model.params(), outcome.model.params());

        let acc = corpus_pppl(&model, &tok, &lines, 2).unwrap();
        assert_eq!(acc.n_sentences, lines.len() - 2);
        assert!(acc.pppl().is_finite() && acc.pppl() > 1.0);
        reports.push(EvalReport {
            model: variant.name().into(),
            task: "pppl".into(),
            metric: Metric::Pppl,
            value: acc.pppl(),
            n_items: acc.n_sentences,
        });

        let pairs = vec![MinimalPair {
            phenomenon: "agreement".into(),
            sentence_good: "the dog by the lake sings .".into(),
            sentence_bad: "the dog by the lake sing .".into(),
        }];
        let pr = minimal_pairs_accuracy(&model, &tok, &pairs, variant.name()).unwrap();
        assert!([0.0, 0.5, 1.0].contains(&pr.overall.value));
        reports.extend(pr.all());
    }

    let s1 = Checkpoint::load(&dir.path().join("s1/final.ckpt")).unwrap().model;
    let gold = parse_gold_trees("the\ndog\nsings\nedge 0 1\nedge 1 2\n").unwrap();
    let trees = induce_trees(&s1, &tok, &gold, "s1").unwrap();
    assert_eq!(trees.gold_edges, 2);
    assert_eq!(trees.predicted[0].edges.len(), 2);
    reports.push(trees.report);

    let back = read_reports(&write_reports(&reports)).unwrap();
    assert_eq!(back, reports);
    let rows = delta_report(&back, "vanilla").unwrap();
    let pppl = |m: &str| reports.iter().find(|r| r.model == m && r.task == "pppl").unwrap().value;
    let row = rows.iter().find(|r| r.model == "s1" && r.task == "pppl").unwrap();
    assert_eq!(row.delta, Some(pppl("s1") - pppl("vanilla")));
    assert!(rows.iter().find(|r| r.task == "trees").unwrap().incomplete());
}
