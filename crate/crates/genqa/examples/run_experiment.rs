use genqa::corpus::*;
use genqa::decoder::{greedy, DecodeConfig};
use genqa::experiments::*;
use genqa::model::ModelConfig;
use genqa::scorer::*;
use genqa::shaping::*;
use genqa::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("ws");
    let dir = tempfile::tempdir().unwrap();
    match which {
        "ws-diag" => {
            // replicate run_ws_learning with diagnostics
            let cfg = WsLearningConfig::default();
            let ccfg = CorpusConfig {
                n_questions: cfg.n_train + cfg.n_dev + cfg.n_eval,
                n_candidates_per_q: 8,
                p_correct: 0.5,
                seed: cfg.corpus_seed,
                ..CorpusConfig::default()
            };
            let all: Vec<QAExample> = generate_corpus(ccfg).unwrap().collect();
            let train_set = &all[..cfg.n_train];
            let dev = &all[cfg.n_train..cfg.n_train + cfg.n_dev];
            let eval = &all[cfg.n_train + cfg.n_dev..];
            let scorer = OracleScorer::new(OracleScorerConfig::default(), &all).unwrap();
            let shaping_cfg = ShapingConfig { k: cfg.k, ..ShapingConfig::default() };
            let vocab = Vocabulary::build_from_corpus(&all, shaping_cfg.l);
            println!("vocab size {}", vocab.len());
            let (rows, stats) = build_dataset(train_set, &scorer, &shaping_cfg, &vocab).unwrap();
            let model_cfg = ModelConfig {
                vocab_size: vocab.len(),
                embed_dim: cfg.embed_dim,
                hidden_dim: cfg.hidden_dim,
                n_layers: 1,
                max_positions: 256,
                seed: cfg.model_seed,
                float_width: 32,
                ..ModelConfig::default()
            };
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
            let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
            let train_cfg = TrainConfig {
                lr,
                batch_size: 32,
                epochs,
                seed: cfg.model_seed,
                checkpoint_every: 0,
                eval_as2: false,
                ..TrainConfig::default()
            };
            let inputs = TrainInputs {
                dataset: &rows, stats: &stats, dev_corpus: dev,
                scorer: &scorer, vocab: &vocab, shaping: &shaping_cfg,
            };
            let t0 = std::time::Instant::now();
            let outcome = train::<f32>(&inputs, &model_cfg, &train_cfg, dir.path()).unwrap();
            println!("steps {} in {:.1}s", outcome.steps, t0.elapsed().as_secs_f64());
            let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
            let losses: Vec<f64> = log.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap()).collect();
            println!("loss first {:.2} mid {:.2} last {:.2}", losses[0], losses[losses.len()/2], losses.last().unwrap());
            // eval with diagnostics
            let dcfg = DecodeConfig { beam_width: 1, min_len: 1, max_len: 24, ..DecodeConfig::default() };
            let mut hits = 0; let mut n = 0;
            for (i, example) in eval.iter().enumerate() {
                if example.candidates.len() < shaping_cfg.k + 1 { continue; }
                let ranked = rank(example, &scorer).unwrap();
                let row = shape(example, &ranked, &shaping_cfg, &vocab).unwrap();
                let g = greedy(&outcome.params, &row.input_ids, &dcfg, &vocab).unwrap();
                let ok = oracle_correct(&g.text, example).unwrap();
                hits += ok as usize; n += 1;
                if i < 8 {
                    println!("q: {}", example.question);
                    println!("  gold: {:?} | gen: {:?} | {}", example.gold_value.as_deref().unwrap(), g.text, if ok {"OK"} else {"MISS"});
                    let target_idx = ranked.top().0;
                    println!("  target was: {:?}", example.candidates[target_idx].text);
                }
            }
            println!("eval accuracy {:.3} ({n} questions)", hits as f64 / n as f64);
        }
        "ws" => {
            let report = run_ws_learning(&WsLearningConfig::default(), dir.path()).unwrap();
            print!("{}", report.render());
        }
        "lw" => {
            let report = run_ws_vs_lw(&WsVsLwConfig::default(), dir.path()).unwrap();
            print!("{}", report.render());
        }
        "sco" => {
            let report = run_sco_monotonic(&ScoMonotonicConfig::default(), dir.path()).unwrap();
            print!("{}", report.render());
        }
        "ckpt" => {
            let report = run_ckpt_selection(&CkptSelectionConfig::default(), dir.path()).unwrap();
            print!("{}", report.render());
        }
        other => eprintln!("unknown experiment {other}"),
    }
}
