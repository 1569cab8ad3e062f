use std::collections::{BTreeMap, VecDeque};

use newvision_core::device::{
    dispatch, estimate_distance, mode_for, parse_command, plan_route, replay, Agent, DeviceState, GridWorld, Health,
    Heading, Intent, Mode, Module, SimulatedSonar, StubPerception, ARRIVED,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent oracle: shortest path length by flood fill over a boolean grid.
fn oracle_distance(w: &GridWorld, goal: [usize; 2]) -> Option<usize> {
    let mut blocked = vec![vec![false; w.width]; w.height];
    for [r, c] in &w.walls {
        blocked[*r][*c] = true;
    }
    let mut dist = vec![vec![usize::MAX; w.width]; w.height];
    dist[w.agent.r][w.agent.c] = 0;
    let mut q = VecDeque::from([(w.agent.r as i64, w.agent.c as i64)]);
    while let Some((r, c)) = q.pop_front() {
        for (dr, dc) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= w.height as i64 || nc >= w.width as i64 {
                continue;
            }
            let (ur, uc) = (nr as usize, nc as usize);
            if !blocked[ur][uc] && dist[ur][uc] == usize::MAX {
                dist[ur][uc] = dist[r as usize][c as usize] + 1;
                q.push_back((nr, nc));
            }
        }
    }
    let d = dist[goal[0]][goal[1]];
    (d != usize::MAX).then_some(d)
}

fn forward_steps(route: &[String]) -> usize {
    route
        .iter()
        .filter_map(|s| s.strip_prefix("forward "))
        .map(|s| s.split_whitespace().next().unwrap().parse::<usize>().unwrap())
        .sum()
}

fn random_world(rng: &mut ChaCha8Rng) -> GridWorld {
    let density = rng.random_range(0.0..0.35);
    let mut walls = Vec::new();
    for r in 0..16 {
        for c in 0..16 {
            if rng.random_bool(density) {
                walls.push([r, c]);
            }
        }
    }
    let free: Vec<[usize; 2]> = (0..16)
        .flat_map(|r| (0..16).map(move |c| [r, c]))
        .filter(|p| !walls.contains(p))
        .collect();
    let pick = |rng: &mut ChaCha8Rng| free[rng.random_range(0..free.len())];
    let [r, c] = pick(rng);
    GridWorld {
        width: 16,
        height: 16,
        walls,
        agent: Agent {
            r,
            c,
            heading: Heading::ALL[rng.random_range(0..4)],
        },
        waypoints: BTreeMap::from([("goal".to_string(), pick(rng))]),
    }
}

#[test]
fn routes_replay_to_destination_on_random_solvable_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut solved = 0;
    let mut unsolvable = 0;
    while solved < 100 {
        let w = random_world(&mut rng);
        w.validate().unwrap();
        let goal = w.waypoints["goal"];
        match (oracle_distance(&w, goal), plan_route(&w, "goal")) {
            (Some(d), Ok(route)) => {
                assert_eq!(forward_steps(&route), d);
                assert_eq!(route.last().map(String::as_str), Some(ARRIVED));
                let end = replay(&w, &route).unwrap();
                assert_eq!([end.r, end.c], goal);
                solved += 1;
            }
            (None, Err(_)) => unsolvable += 1,
            (oracle, got) => panic!("oracle {oracle:?} vs planner {got:?}"),
        }
    }
    assert!(unsolvable > 0, "sweep should exercise NoPath too");
}

#[test]
fn mode_table_covers_all_health_combinations() {
    for bits in 0..8u8 {
        let failed = |i: u8| bits & (1 << i) != 0;
        let health: BTreeMap<Module, Health> = Module::ALL
            .iter()
            .enumerate()
            .map(|(i, &m)| (m, if failed(i as u8) { Health::Failed } else { Health::Healthy }))
            .collect();
        let (p, n) = (failed(0), failed(1));
        let expect = if bits == 0 {
            Mode::Operational
        } else if bits == 7 || (p && n) {
            Mode::Failsafe
        } else {
            Mode::Degraded
        };
        assert_eq!(mode_for(&health), expect, "health {health:?}");
        let mut s = DeviceState::default();
        for (m, h) in &health {
            s.set_module_health(*m, *h);
        }
        assert_eq!(s.mode, expect);
    }
}

fn intents_for(module: Module) -> Vec<Intent> {
    let cmds: &[&str] = match module {
        Module::Perception => &["what is that", "describe the scene", "is there a red circle"],
        Module::Navigation => &["navigate to the kitchen", "navigate to the front door", "navigate to mars"],
        Module::Ranging => &["how far is it"],
    };
    cmds.iter().map(|c| parse_command(c)).collect()
}

#[test]
fn failing_one_module_never_changes_another_modules_answers() {
    let world = GridWorld::demo();
    let stub = StubPerception::new("a large red circle");
    for a in Module::ALL {
        for b in Module::ALL {
            if a == b {
                continue;
            }
            for intent in intents_for(b) {
                let mut healthy = DeviceState::default();
                let mut degraded = DeviceState::default();
                degraded.set_module_health(a, Health::Failed);
                let want = dispatch(&intent, &mut healthy, &world, &stub, &SimulatedSonar);
                let got = dispatch(&intent, &mut degraded, &world, &stub, &SimulatedSonar);
                assert_eq!((got.text, got.route), (want.text, want.route), "{a} failed, {:?}", intent.kind);
            }
        }
    }
}

#[test]
fn failed_module_answers_with_apology_naming_it() {
    let world = GridWorld::demo();
    let stub = StubPerception::new("x");
    for m in Module::ALL {
        let mut s = DeviceState::default();
        s.set_module_health(m, Health::Failed);
        for intent in intents_for(m) {
            let r = dispatch(&intent, &mut s, &world, &stub, &SimulatedSonar);
            assert!(r.text.starts_with("Sorry") && r.text.contains(m.name()), "{}", r.text);
        }
    }
}

#[test]
fn distance_matches_formula_on_random_echo_times() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let t: f64 = rng.random_range(0.0..100_000.0);
        let d = estimate_distance(t).unwrap();
        assert!((d - 343.0 * t / 2.0 * 1e-6).abs() < 1e-3);
    }
}

proptest! {
    #[test]
    fn distance_is_linear(t in 0.0f64..1e7) {
        prop_assert_eq!(estimate_distance(2.0 * t).unwrap(), 2.0 * estimate_distance(t).unwrap());
    }

    #[test]
    fn navigate_always_carries_destination(dest in "[a-z][a-z ]{0,20}") {
        let intent = parse_command(&format!("Navigate to {dest}!"));
        match intent.kind {
            newvision_core::device::IntentKind::Navigate(d) => prop_assert!(!d.is_empty()),
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn parse_command_never_panics(text in ".{0,60}") {
        let intent = parse_command(&text);
        prop_assert_eq!(intent.raw, text);
    }
}
