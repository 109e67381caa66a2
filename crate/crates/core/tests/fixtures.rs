//! Replays every oracle fixture case against the library.

use serde_json::{json, Value};

use aida_core::dfc::{batch_entropy, simplex_project};
use aida_core::eval::{self, MetricsReport, RetrievalItem, RetrievalSplit};
use aida_core::msidg::{channel_stats, transfer_values, ChannelStats};
use aida_core::optim::{optimizer_step, AdamConfig, AdamState};
use aida_core::Tensor;
use aida_oracles::cases::max_abs_diff;
use aida_oracles::load_cases;

fn get<T: serde::de::DeserializeOwned>(v: &Value, k: &str) -> T {
    serde_json::from_value(v[k].clone()).unwrap()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn items(v: &Value, k: &str) -> Vec<RetrievalItem> {
    let raw: Vec<(Vec<f64>, usize, usize)> = get(v, k);
    raw.into_iter().map(|(embedding, identity, camera)| RetrievalItem { embedding, identity, camera }).collect()
}

fn implementation(oracle: &str, x: &Value) -> Value {
    match oracle {
        "average_precision" => json!(eval::average_precision(&get::<Vec<bool>>(x, "matches"))),
        "euclidean" => json!(eval::euclidean(&get::<Vec<f64>>(x, "a"), &get::<Vec<f64>>(x, "b"))),
        "grid_project" => json!(simplex_project(&get::<Vec<f64>>(x, "v")).as_slice()),
        "nmi" => json!(eval::nmi(&get::<Vec<usize>>(x, "a"), &get::<Vec<usize>>(x, "b")).unwrap()),
        "silhouette" => json!(eval::silhouette(&get::<Vec<Vec<f64>>>(x, "points"), &get::<Vec<usize>>(x, "assign")).unwrap()),
        "mean_row_entropy" => json!(batch_entropy(&rows_tensor(&get::<Vec<Vec<f64>>>(x, "rows"))).unwrap()),
        "column_stats" => {
            let s = channel_stats(&rows_tensor(&get::<Vec<Vec<f64>>>(x, "rows"))).unwrap();
            json!({ "mu": s.mu, "sigma": s.sigma })
        }
        "restyle" => {
            let donor = ChannelStats { mu: get(x, "mu"), sigma: get(x, "sigma") };
            let out = transfer_values(&rows_tensor(&get::<Vec<Vec<f64>>>(x, "rows")), &donor, get(x, "eps")).unwrap();
            json!((0..out.rows()).map(|i| out.row(i).to_vec()).collect::<Vec<_>>())
        }
        "adam_first_step" => {
            let mut p = Tensor::scalar(get(x, "theta"));
            let g = Tensor::scalar(get(x, "g"));
            let hyper = AdamConfig { eps: get(x, "eps"), ..Default::default() };
            let mut st = AdamState::new([&p]);
            optimizer_step(&mut [&mut p], &[&g], &mut st, get(x, "lr"), &hyper);
            json!(p.item())
        }
        "retrieval" => {
            let split = RetrievalSplit { query: items(x, "query"), gallery: items(x, "gallery") };
            json!({ "cmc": eval::cmc(&split).curve, "map": eval::mean_ap(&split).map })
        }
        "mean" => {
            let reports: Vec<MetricsReport> =
                get::<Vec<f64>>(x, "values").into_iter().map(|map| MetricsReport { map, ..Default::default() }).collect();
            json!(MetricsReport::average(&reports).map)
        }
        other => panic!("no implementation mapped for oracle {other}"),
    }
}

#[test]
fn every_case_matches_its_regenerated_oracle() {
    let cases = load_cases().unwrap();
    assert!(cases.len() >= 15);
    for case in &cases {
        let oracle = case.regenerate().unwrap();
        let ours = implementation(&case.oracle, &case.inputs);
        let d = max_abs_diff(&ours, &oracle).unwrap();
        assert!(d <= case.tolerance, "{}: library {ours} vs oracle {oracle} (diff {d:e})", case.name);
    }
}
