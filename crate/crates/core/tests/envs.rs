use cac_core::envs::coordination::{deterministic_reward, N_ACTIONS};
use cac_core::envs::CoordinationGame;
use cac_core::mdp::JointAction;

/// Payoff written out directly from the game's rule.
fn brute_payoff(agent: usize, actions: &[usize]) -> f64 {
    let mut matches = 0.0;
    for (j, &a) in actions.iter().enumerate() {
        if j != agent && a == actions[agent] {
            matches += 1.0;
        }
    }
    let d = actions[agent] as f64 - 3.5;
    d * d + matches
}

#[test]
fn reward_tensor_matches_rule_for_every_joint_action() {
    for n in 1..=4 {
        let game = CoordinationGame::new(n, false, 0.9).unwrap();
        let counts = vec![N_ACTIONS; n];
        for j in 0..game.mdp().n_joint_actions() {
            let a = JointAction::decode(j, &counts);
            for i in 0..n {
                let want = brute_payoff(i, a.actions());
                assert_eq!(game.mdp().reward(i, 0, j), want);
                assert_eq!(deterministic_reward(i, a.actions()), want);
            }
        }
    }
}

#[test]
fn team_optimum_is_everyone_on_the_same_edge_action() {
    for n in 1..=4 {
        let game = CoordinationGame::new(n, false, 0.9).unwrap();
        let counts = vec![N_ACTIONS; n];
        let best = (0..game.mdp().n_joint_actions())
            .map(|j| game.mdp().mean_reward_index(0, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let argmax: Vec<Vec<usize>> = (0..game.mdp().n_joint_actions())
            .filter(|&j| game.mdp().mean_reward_index(0, j) == best)
            .map(|j| JointAction::decode(j, &counts).actions().to_vec())
            .collect();
        assert_eq!(argmax, vec![vec![0; n], vec![7; n]], "N = {n}");
        assert_eq!(best, game.max_reward());
        // the bound used by the model is the largest single payoff
        let largest = (0..game.mdp().n_joint_actions())
            .flat_map(|j| (0..n).map(move |i| (i, j)))
            .map(|(i, j)| game.mdp().reward(i, 0, j))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(largest, 12.25 + (n as f64 - 1.0));
    }
}
