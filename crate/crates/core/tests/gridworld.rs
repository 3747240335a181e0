mod support;

use gridprobe_core::gridworld::{
    execute, latent_features, sample_initial_state, sample_program, Action, Crash, Direction,
    GridState, Position, Program, SemanticsMap, WorldConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<Action> {
    let n = rng.gen_range(0..=15);
    (0..n).map(|_| Action::ALL[rng.gen_range(0..5)]).collect()
}

#[test]
fn execute_matches_the_reference_interpreter() {
    let semantics = support::all_semantics();
    let dense = WorldConfig {
        rock_density: 0.3,
        marker_density: 0.3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut crashes = 0;
    for k in 0..10_000u64 {
        let world = if k % 2 == 0 {
            WorldConfig::default()
        } else {
            dense
        };
        let s0 = sample_initial_state(k, &world).unwrap();
        let sem = semantics[rng.gen_range(0..semantics.len())];
        let tokens = random_tokens(&mut rng);
        let names: Vec<&str> = tokens.iter().map(|a| a.name()).collect();
        let expected = support::run(&support::from_state(&s0), &names, &support::table_of(&sem));
        let got = execute(&s0, &Program::new(tokens), &sem);
        match (got, expected) {
            (Ok(trace), Ok(states)) => {
                assert_eq!(trace.states.len(), states.len());
                for (a, b) in trace.states.iter().zip(&states) {
                    assert_eq!(support::from_state(a), *b, "case {k}");
                    let l = latent_features(a);
                    assert_eq!(
                        (l.row, l.col, l.dir.index(), l.facing_blocked),
                        support::label(b),
                        "case {k}"
                    );
                }
            }
            (Err(e), Err((index, kind))) => {
                crashes += 1;
                assert_eq!(e.index, index, "case {k}");
                let kind_matches = matches!(
                    (e.crash, kind),
                    (Crash::MoveBlocked, support::OracleCrash::Blocked)
                        | (Crash::MarkerConflict, support::OracleCrash::Marker)
                );
                assert!(kind_matches, "case {k}: {e:?} vs {kind:?}");
            }
            (got, expected) => panic!("case {k}: library {got:?}, oracle {expected:?}"),
        }
    }
    assert!(
        crashes > 1000,
        "the random programs should exercise crashes, got {crashes}"
    );
}

#[test]
fn empty_program_and_full_rotation() {
    let s0 = sample_initial_state(3, &WorldConfig::default()).unwrap();
    let id = SemanticsMap::identity();
    assert_eq!(
        execute(&s0, &Program::default(), &id).unwrap().states,
        vec![s0]
    );
    let t = execute(&s0, &Program::new(vec![Action::TurnRight; 4]), &id).unwrap();
    assert_eq!(t.states.len(), 5);
    assert_eq!(*t.last(), s0);
}

#[test]
fn executing_under_a_permutation_is_executing_the_mapped_program() {
    let semantics = support::all_semantics();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..2000u64 {
        let s0 = sample_initial_state(k, &WorldConfig::default()).unwrap();
        let sem = semantics[rng.gen_range(0..semantics.len())];
        let p = Program::new(random_tokens(&mut rng));
        let a = execute(&s0, &p, &sem).map(|t| t.states);
        let b = execute(&s0, &sem.map_program(&p), &SemanticsMap::identity()).map(|t| t.states);
        assert_eq!(a, b);
    }
}

#[test]
fn markers_change_by_one_only_on_marker_actions() {
    let id = SemanticsMap::identity();
    for k in 0..500u64 {
        let s0 = sample_initial_state(k, &WorldConfig::default()).unwrap();
        let p = sample_program(k, &s0, 1..=15, &id).unwrap();
        let t = execute(&s0, &p, &id).unwrap();
        for (i, a) in p.actions().iter().enumerate() {
            let d = t.states[i + 1].marker_count() as i64 - t.states[i].marker_count() as i64;
            let want = match a {
                Action::PutMarker => 1,
                Action::PickMarker => -1,
                _ => 0,
            };
            assert_eq!(d, want);
        }
    }
}

#[test]
fn rock_rate_matches_the_configured_density() {
    let cfg = WorldConfig::default();
    let (mut rocks, mut markers) = (0u64, 0u64);
    let n = 10_000u64;
    for k in 0..n {
        let s = sample_initial_state(k, &cfg).unwrap();
        rocks += s.rocks().count_ones() as u64;
        markers += s.markers().count_ones() as u64;
    }
    let cells = (n * 64) as f64;
    assert!(
        (rocks as f64 / cells - 0.1).abs() < 0.01,
        "rock rate {}",
        rocks as f64 / cells
    );
    // A cell holds a marker when it is not a rock and then draws a marker.
    assert!((markers as f64 / cells - 0.9 * 0.1).abs() < 0.01);
}

#[test]
fn zero_densities_give_an_empty_grid() {
    let s = sample_initial_state(
        9,
        &WorldConfig {
            rock_density: 0.0,
            marker_density: 0.0,
        },
    )
    .unwrap();
    assert_eq!((s.rocks(), s.markers()), (0, 0));
    assert_eq!(
        sample_initial_state(9, &WorldConfig::default()),
        sample_initial_state(9, &WorldConfig::default())
    );
}

#[test]
fn program_lengths_are_uniform_and_programs_never_crash() {
    let id = SemanticsMap::identity();
    let mut counts = [0usize; 11];
    let n = 10_000u64;
    for k in 0..n {
        let s0 = sample_initial_state(k, &WorldConfig::default()).unwrap();
        let p = sample_program(k + 1_000_000, &s0, 6..=10, &id).unwrap();
        counts[p.len()] += 1;
        assert!(execute(&s0, &p, &id).is_ok());
    }
    for len in 6..=10 {
        let f = counts[len] as f64 / n as f64;
        assert!((f - 0.2).abs() < 0.02, "length {len}: {f}");
    }
}

#[test]
fn sampled_tokens_relate_by_the_inverse_permutation() {
    let id = SemanticsMap::identity();
    for sem in support::all_semantics() {
        for k in 0..20u64 {
            let s0 = sample_initial_state(k, &WorldConfig::default()).unwrap();
            let base = sample_program(k, &s0, 1..=15, &id).unwrap();
            let other = sample_program(k, &s0, 1..=15, &sem).unwrap();
            assert_eq!(other, sem.invert().map_program(&base));
            assert!(execute(&s0, &other, &sem).is_ok());
        }
    }
}

#[test]
fn latent_feature_examples() {
    let corner = GridState::empty(Position::new(0, 0), Direction::North).unwrap();
    assert!(latent_features(&corner).facing_blocked);
    let rock = Position::new(4, 5);
    let s = GridState::new(1 << rock.cell(), 0, Position::new(4, 4), Direction::East).unwrap();
    let l = latent_features(&s);
    assert_eq!(
        (l.row, l.col, l.dir, l.facing_blocked),
        (4, 4, Direction::East, true)
    );
    let open = GridState::empty(Position::new(4, 4), Direction::East).unwrap();
    assert!(!latent_features(&open).facing_blocked);
}

#[test]
fn permutation_group_laws() {
    let c = SemanticsMap::cycle3();
    assert!(c.compose(&c).compose(&c).is_identity());
    assert!(!c.compose(&c).is_identity());
    for s in support::all_semantics() {
        assert!(s.compose(&s.invert()).is_identity());
    }
    let swap = SemanticsMap::swap(Action::Move, Action::TurnLeft);
    assert_eq!(swap.invert(), swap);
}
