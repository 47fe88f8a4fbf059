//! Matching, recall and panoptic quality against brute-force and
//! direct-formula oracles.

mod common;

use std::collections::BTreeMap;

use common::{assert_close, rng, scene};
use psg_core::metrics::{
    chance_recall, evaluate, evaluate_model, evaluate_oracle, mask_iou, match_triplets, panoptic_quality,
    MetricsReport, RankedTriplet, ScenePrediction,
};
use psg_core::model::{ModelConfig, RelationModel};
use psg_core::numeric::Array;
use psg_core::scene::{generate_corpus, BinaryMask, CorpusConfig, Scene, Triplet};
use psg_core::Error;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const H: usize = 8;
const W: usize = 8;

/// Non-overlapping masks from a pixel owner map; `None` is background.
fn partition(owner: &[Option<usize>], n: usize) -> Vec<BinaryMask> {
    (0..n)
        .map(|i| BinaryMask::new(H, W, owner.iter().map(|&o| o == Some(i)).collect()).unwrap())
        .collect()
}

fn random_owner(n: usize, r: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    // Vertical bands with ragged borders keep segments mostly contiguous.
    (0..H * W)
        .map(|px| {
            if r.gen_bool(0.15) {
                return None;
            }
            let band = (px % W) * n / W;
            if r.gen_bool(0.1) {
                Some(r.gen_range(0..n))
            } else {
                Some(band)
            }
        })
        .collect()
}

/// A noisy re-segmentation of the ground truth with shuffled segment order.
fn perturbed(owner: &[Option<usize>], n: usize, noise: f64, r: &mut ChaCha8Rng) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(r);
    let out = owner
        .iter()
        .map(|&o| {
            if r.gen_bool(noise) {
                if r.gen_bool(0.3) {
                    None
                } else {
                    Some(r.gen_range(0..n))
                }
            } else {
                o.map(|i| perm[i])
            }
        })
        .collect();
    (out, perm)
}

struct Config {
    gt: Scene,
    pred: ScenePrediction,
}

fn random_config(r: &mut ChaCha8Rng) -> Config {
    let n = r.gen_range(2..5);
    let classes = r.gen_range(1..3);
    let preds = r.gen_range(1..4);
    let owner = random_owner(n, r);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
    let mut triplets: Vec<Triplet> = Vec::new();
    for _ in 0..r.gen_range(0..=5) {
        let s = r.gen_range(0..n);
        let o = (s + r.gen_range(1..n)) % n;
        let t = Triplet::new(s, o, r.gen_range(0..preds));
        if !triplets.contains(&t) {
            triplets.push(t);
        }
    }
    let gt = scene(
        Array::zeros(&[H, W, 1]),
        partition(&owner, n),
        labels.clone(),
        triplets.clone(),
    );

    let noise = [0.0, 0.2, 0.5, 0.9][r.gen_range(0..4)];
    let (pred_owner, perm) = perturbed(&owner, n, noise, r);
    let pred_labels: Vec<usize> = (0..n)
        .map(|p| {
            let g = perm.iter().position(|&q| q == p).unwrap();
            if r.gen_bool(0.2) {
                r.gen_range(0..classes)
            } else {
                labels[g]
            }
        })
        .collect();
    let mut ranked: Vec<RankedTriplet> = Vec::new();
    for _ in 0..r.gen_range(0..10) {
        // Mostly ground-truth triplets mapped through the permutation, sometimes duplicated.
        let (s, o, p) = match triplets.choose(r) {
            Some(t) if r.gen_bool(0.7) => (
                perm[t.subject],
                perm[t.object],
                if r.gen_bool(0.8) {
                    t.predicate
                } else {
                    r.gen_range(0..preds)
                },
            ),
            _ => {
                let s = r.gen_range(0..n);
                (s, (s + r.gen_range(1..n)) % n, r.gen_range(0..preds))
            }
        };
        ranked.push(RankedTriplet {
            subject: s,
            object: o,
            predicate: p,
            score: r.gen_range(0..4) as f64 / 4.0,
        });
    }
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.key().cmp(&b.key())));
    ranked.dedup_by(|a, b| a.key() == b.key() && a.score == b.score);
    let pred = ScenePrediction {
        scene_id: gt.scene_id.clone(),
        masks: partition(&pred_owner, n),
        labels: pred_labels,
        triplets: ranked,
    };
    pred.validate().unwrap();
    Config { gt, pred }
}

fn direct_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for row in 0..a.height() {
        for col in 0..a.width() {
            let (x, y) = (a.get(row, col), b.get(row, col));
            inter += usize::from(x && y);
            union += usize::from(x || y);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Largest number of ground-truth triplets any one-to-one assignment of the
/// top `k` predictions can recall.
fn optimal_matches(c: &Config, k: usize) -> usize {
    let top = &c.pred.triplets[..k.min(c.pred.triplets.len())];
    let seg =
        |p: usize, g: usize| c.pred.labels[p] == c.gt.labels[g] && direct_iou(&c.pred.masks[p], &c.gt.masks[g]) > 0.5;
    let compat: Vec<Vec<bool>> = top
        .iter()
        .map(|t| {
            c.gt.graph
                .triplets
                .iter()
                .map(|g| t.predicate == g.predicate && seg(t.subject, g.subject) && seg(t.object, g.object))
                .collect()
        })
        .collect();
    fn best(compat: &[Vec<bool>], used: &mut Vec<bool>, i: usize) -> usize {
        if i == compat.len() {
            return 0;
        }
        let mut out = best(compat, used, i + 1);
        for g in 0..used.len() {
            if compat[i][g] && !used[g] {
                used[g] = true;
                out = out.max(1 + best(compat, used, i + 1));
                used[g] = false;
            }
        }
        out
    }
    best(&compat, &mut vec![false; c.gt.graph.triplets.len()], 0)
}

#[test]
fn greedy_matching_equals_optimal_assignment() {
    let mut r = rng(60);
    let mut nontrivial = 0;
    for _ in 0..200 {
        let c = random_config(&mut r);
        let k_max = c.pred.triplets.len().max(1);
        let matches = match_triplets(&c.pred, &c.gt, k_max).unwrap();
        for k in 1..=k_max {
            let greedy = matches.gt.iter().filter(|m| m.matched_within(k)).count();
            assert_eq!(greedy, optimal_matches(&c, k), "k = {k}");
            // Matching at k directly agrees with ranks recorded at k_max.
            let direct = match_triplets(&c.pred, &c.gt, k).unwrap();
            assert_eq!(direct.gt.iter().filter(|m| m.rank.is_some()).count(), greedy);
            nontrivial += usize::from(greedy > 0);
        }
    }
    assert!(nontrivial > 100, "generator too sparse: {nontrivial}");
}

#[test]
fn iou_and_pq_match_direct_formulas() {
    let mut r = rng(61);
    let mut matched = 0;
    for _ in 0..200 {
        let c = random_config(&mut r);
        for pm in &c.pred.masks {
            for gm in &c.gt.masks {
                assert_close(mask_iou(pm, gm).unwrap(), direct_iou(pm, gm), 1e-12, "iou");
            }
        }
        let (mut tp, mut iou_sum) = (0usize, 0.0);
        for (pm, pl) in c.pred.masks.iter().zip(&c.pred.labels) {
            for (gm, gl) in c.gt.masks.iter().zip(&c.gt.labels) {
                let iou = direct_iou(pm, gm);
                if pl == gl && iou > 0.5 {
                    tp += 1;
                    iou_sum += iou;
                }
            }
        }
        let fp = c.pred.masks.len() - tp;
        let fn_ = c.gt.masks.len() - tp;
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        let q = panoptic_quality(&c.pred.masks, &c.pred.labels, &c.gt.masks, &c.gt.labels).unwrap();
        assert_close(q.pq, iou_sum / denom, 1e-12, "pq");
        assert_close(q.rq, tp as f64 / denom, 1e-12, "rq");
        assert_close(q.sq, if tp == 0 { 0.0 } else { iou_sum / tp as f64 }, 1e-12, "sq");
        assert_close(q.pq, q.sq * q.rq, 1e-12, "pq = sq rq");
        matched += tp;
    }
    assert!(matched > 100);
}

fn two_object_scene(id: &str, triplets: Vec<Triplet>) -> Scene {
    let mut s = scene(
        Array::zeros(&[H, W, 1]),
        vec![
            BinaryMask::rectangle(H, W, 0, 0, H, 4),
            BinaryMask::rectangle(H, W, 0, 4, H, 4),
        ],
        vec![0, 1],
        triplets,
    );
    s.scene_id = id.into();
    s
}

fn ranked(s: &Scene, keys: &[(usize, usize, usize)]) -> ScenePrediction {
    let mut p = ScenePrediction::oracle(s);
    p.triplets = keys
        .iter()
        .enumerate()
        .map(|(rank, &(subject, object, predicate))| RankedTriplet {
            subject,
            object,
            predicate,
            score: 1.0 - rank as f64 / 10.0,
        })
        .collect();
    p
}

#[test]
fn hand_built_corpus() {
    let scenes = vec![
        two_object_scene("a", vec![Triplet::new(0, 1, 0), Triplet::new(1, 0, 1)]),
        two_object_scene("b", vec![Triplet::new(0, 1, 2)]),
        two_object_scene("c", vec![Triplet::new(0, 1, 0)]),
    ];
    let preds: BTreeMap<&str, Vec<(usize, usize, usize)>> = [
        ("a", vec![(0, 1, 0), (0, 1, 1), (1, 0, 1)]),
        ("b", vec![(0, 1, 1), (1, 0, 2)]),
        ("c", vec![(0, 1, 0)]),
    ]
    .into();
    let report = evaluate(&scenes, &[1, 3], |s, _| Ok(ranked(s, &preds[s.scene_id.as_str()]))).unwrap();
    assert_eq!(report.recall[&1], 0.5);
    assert_eq!(report.recall[&3], 0.75);
    // Predicate 0: 2/2; predicate 1: 0/1 then 1/1; predicate 2: 0/1.
    assert_close(report.mean_recall[&1], 1.0 / 3.0, 1e-15, "mR@1");
    assert_close(report.mean_recall[&3], 2.0 / 3.0, 1e-15, "mR@3");
    assert_eq!(report.per_predicate[&1].matched, 1);
    assert_eq!((report.pq, report.sq, report.rq), (1.0, 1.0, 1.0));
    assert_eq!(report.matches[0].gt[1].rank, Some(2));
}

#[test]
fn corpus_recall_matches_brute_force_recomputation() {
    let mut r = rng(62);
    for _ in 0..20 {
        let configs: Vec<Config> = (0..6).map(|_| random_config(&mut r)).collect();
        if configs.iter().all(|c| c.gt.graph.triplets.is_empty()) {
            continue;
        }
        let scenes: Vec<Scene> = configs
            .iter()
            .enumerate()
            .map(|(i, c)| Scene {
                scene_id: format!("s{i}"),
                ..c.gt.clone()
            })
            .collect();
        let ks = [1, 2, 5];
        let report = evaluate(&scenes, &ks, |s, _| {
            let i: usize = s.scene_id[1..].parse().unwrap();
            Ok(ScenePrediction {
                scene_id: s.scene_id.clone(),
                ..configs[i].pred.clone()
            })
        })
        .unwrap();
        let total: usize = configs.iter().map(|c| c.gt.graph.triplets.len()).sum();
        let mut last = 0.0;
        for k in ks {
            let hits: usize = configs.iter().map(|c| optimal_matches(c, k)).sum();
            assert_close(report.recall[&k], hits as f64 / total as f64, 1e-15, "R@K");
            assert!(report.recall[&k] >= last);
            last = report.recall[&k];
            // Per-predicate recall from the optimal matching of each predicate alone.
            let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for c in &configs {
                for p in c.gt.graph.triplets.iter().map(|t| t.predicate) {
                    per.entry(p).or_default().0 += 1;
                }
                for p in per.keys().copied().collect::<Vec<_>>() {
                    let mut only = Config {
                        gt: c.gt.clone(),
                        pred: c.pred.clone(),
                    };
                    only.gt.graph.triplets.retain(|t| t.predicate == p);
                    per.get_mut(&p).unwrap().1 += optimal_matches(&only, k);
                }
            }
            let mr = per.values().map(|&(n, m)| m as f64 / n as f64).sum::<f64>() / per.len() as f64;
            assert_close(report.mean_recall[&k], mr, 1e-12, "mR@K");
        }
    }
}

#[test]
fn oracle_scores_one_and_untrained_model_is_near_chance() {
    let scenes = generate_corpus(&CorpusConfig {
        num_scenes: 100,
        seed: 3,
        ..CorpusConfig::default()
    })
    .unwrap();
    let oracle = evaluate_oracle(&scenes, &[20, 50, 100]).unwrap();
    for k in &oracle.ks {
        assert_eq!((oracle.recall[k], oracle.mean_recall[k]), (1.0, 1.0));
    }
    assert_eq!((oracle.pq, oracle.sq, oracle.rq), (1.0, 1.0, 1.0));

    let model = RelationModel::<f64>::new(ModelConfig::default()).unwrap();
    let report = evaluate_model(&scenes, &model, &[1, 5, 20]).unwrap();
    for w in report.ks.windows(2) {
        assert!(report.recall[&w[1]] >= report.recall[&w[0]]);
        assert!(report.mean_recall[&w[1]] >= report.mean_recall[&w[0]]);
    }
    let chance = chance_recall(&scenes, 8, 5).unwrap();
    assert!(
        report.recall[&5] < 2.0 * chance,
        "R@5 {} vs chance {chance}",
        report.recall[&5]
    );
}

#[test]
fn report_round_trips_through_json() {
    let scenes = generate_corpus(&CorpusConfig {
        num_scenes: 30,
        ..CorpusConfig::default()
    })
    .unwrap();
    let model = RelationModel::<f64>::new(ModelConfig::default()).unwrap();
    let mut report = evaluate_model(&scenes, &model, &[50, 20]).unwrap();
    assert!(report.recall.values().all(|&r| r > 0.0 && r < 1.0));
    report.corpus_id = "c".into();
    assert_eq!(report.ks, vec![20, 50]);
    let json = report.to_json().unwrap();
    assert!(json.contains("\"Ks\""));
    assert_eq!(MetricsReport::from_json(&json).unwrap(), report);
    for line in report.table().lines().skip(1).take(2) {
        let cols: Vec<&str> = line.split('\t').collect();
        let k: usize = cols[0].parse().unwrap();
        assert_eq!(cols[1].parse::<f64>().unwrap(), report.recall[&k]);
        assert_eq!(cols[2].parse::<f64>().unwrap(), report.mean_recall[&k]);
    }
}

#[test]
fn contract_violations() {
    let s = two_object_scene("x", vec![Triplet::new(0, 1, 0)]);
    assert!(matches!(
        evaluate(&[], &[20], |_, _| unreachable!()),
        Err(Error::Undefined(_))
    ));
    assert!(evaluate(std::slice::from_ref(&s), &[], |s, _| Ok(ScenePrediction::oracle(s))).is_err());
    assert!(evaluate(std::slice::from_ref(&s), &[0], |s, _| Ok(ScenePrediction::oracle(s))).is_err());
    let unranked = ranked(&s, &[(0, 1, 0), (1, 0, 0)]);
    let mut bad = unranked.clone();
    bad.triplets.reverse();
    assert!(evaluate(std::slice::from_ref(&s), &[2], |_, _| Ok(bad.clone())).is_err());
    let overlapping = BinaryMask::full(H, W);
    assert!(matches!(
        panoptic_quality(&[overlapping.clone(), overlapping], &[0, 1], &s.masks, &s.labels),
        Err(Error::Contract(_))
    ));
    let empty = two_object_scene("e", vec![]);
    assert!(matches!(evaluate_oracle(&[empty], &[20]), Err(Error::Undefined(_))));
}
