mod common;

use common::blob_setup;
use serde_json::json;
use superfed::experiment;
use superfed::federation::{self, EvalPlan};
use superfed::{ClientState, LocalInit, WeightVector};

fn small() -> serde_json::Value {
    json!({
        "clients": 8,
        "rounds": 6,
        "personalization_start": 2,
        "fraction": 0.5,
        "local_epochs": 1,
        "hidden": [12],
        "seed": 9,
        "dataset": { "kind": "blobs", "classes": 4, "dims": 6, "per_class": 60, "spread": 1.0 }
    })
}

fn same_bits(a: &WeightVector, b: &WeightVector) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn each_selected_client_moves_exactly_one_model_each_way() {
    let (cfg, prepared) = blob_setup(small());
    let fed = cfg.fed_config();
    let model_bytes = prepared.spec.param_count() * std::mem::size_of::<f64>();
    let mut clients = prepared.clients.clone();
    let initial = experiment::initial_global(&cfg, &prepared.spec);
    let mut rounds = 0;
    federation::run_with_observer(&fed, &mut clients, initial, &EvalPlan::default(), |view| {
        let r = view.record;
        assert_eq!(r.selected.len(), 4);
        assert_eq!(r.bytes_down, r.selected.len() * model_bytes);
        assert_eq!(r.bytes_up, r.selected.len() * model_bytes);
        assert_eq!(view.uploads.len(), r.selected.len());
        rounds += 1;
    })
    .unwrap();
    assert_eq!(rounds, 6);
}

#[test]
fn local_models_never_reach_the_server() {
    let (cfg, prepared) = blob_setup(small());
    let fed = cfg.fed_config();
    let mut clients = prepared.clients.clone();
    let initial = experiment::initial_global(&cfg, &prepared.spec);
    federation::run_with_observer(&fed, &mut clients, initial, &EvalPlan::default(), |view| {
        for c in view.clients {
            let Some(w_l) = c.local_model() else { continue };
            assert!(!same_bits(w_l, view.global), "round {}: global equals local {}", view.record.round, c.id);
            for u in view.uploads {
                assert!(!std::ptr::eq(u.federated.iter().next().unwrap(), w_l.iter().next().unwrap()));
                assert!(!same_bits(&u.federated, w_l), "upload {} equals local {}", u.client_id, c.id);
            }
        }
        // every upload comes from a selected client and only from it
        let ids: Vec<usize> = view.uploads.iter().map(|u| u.client_id).collect();
        assert_eq!(ids, view.record.selected);
    })
    .unwrap();
}

#[test]
fn unselected_clients_keep_their_local_models() {
    let (cfg, prepared) = blob_setup(small());
    let fed = cfg.fed_config();
    let mut clients = prepared.clients.clone();
    let initial = experiment::initial_global(&cfg, &prepared.spec);
    let mut before: Vec<Option<WeightVector>> = clients.iter().map(|c| c.local_model().cloned()).collect();
    federation::run_with_observer(&fed, &mut clients, initial, &EvalPlan::default(), |view| {
        for c in view.clients {
            let selected = view.record.selected.contains(&c.id);
            match (&before[c.id], c.local_model()) {
                (prev, Some(now)) if selected => {
                    if let Some(p) = prev {
                        assert!(!same_bits(p, now));
                    }
                }
                (Some(p), Some(now)) => assert!(same_bits(p, now), "client {} drifted", c.id),
                (None, None) => {}
                other => panic!("client {}: unexpected local state {:?}", c.id, other.0.is_some()),
            }
        }
        before = view.clients.iter().map(|c| c.local_model().cloned()).collect();
    })
    .unwrap();
}

fn run_once(parallel: bool, init: LocalInit) -> (WeightVector, Vec<ClientState>) {
    let mut v = small();
    v["parallel"] = json!(parallel);
    v["local_init"] = serde_json::to_value(init).unwrap();
    let (cfg, prepared) = blob_setup(v);
    let mut clients = prepared.clients;
    let initial = experiment::initial_global(&cfg, &prepared.spec);
    // several workers even on a single-core machine, so completion order varies
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let out = pool
        .install(|| federation::run(&cfg.fed_config(), &mut clients, initial, &EvalPlan::default()))
        .unwrap();
    (out.server.global, clients)
}

#[test]
fn serial_and_parallel_schedules_agree_bitwise() {
    for init in [LocalInit::FreshRandom, LocalInit::CopyGlobal] {
        let (g_par, c_par) = run_once(true, init);
        let (g_ser, c_ser) = run_once(false, init);
        assert!(same_bits(&g_par, &g_ser));
        for (a, b) in c_par.iter().zip(&c_ser) {
            match (a.local_model(), b.local_model()) {
                (Some(x), Some(y)) => assert!(same_bits(x, y)),
                (None, None) => {}
                _ => panic!("client {} differs in local state", a.id),
            }
        }
    }
}

#[test]
fn mismatched_client_list_is_rejected() {
    let (cfg, prepared) = blob_setup(small());
    let mut clients: Vec<ClientState> = prepared.clients[..7].to_vec();
    let initial = experiment::initial_global(&cfg, &prepared.spec);
    let err = federation::run(&cfg.fed_config(), &mut clients, initial, &EvalPlan::default()).unwrap_err();
    assert_eq!(err.partial.round, 0);
}
