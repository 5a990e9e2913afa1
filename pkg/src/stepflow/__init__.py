"""Step-level process rewards and GFlowNet fine-tuning at desk scale.

Stages: MCTS label generation (:mod:`stepflow.mcts_datagen`), rollout reuse
(:mod:`stepflow.augment`), process reward models (:mod:`stepflow.prm`),
subtrajectory-balance training (:mod:`stepflow.gfn`) and guided search and
evaluation (:mod:`stepflow.search_eval`), over the synthetic environments in
:mod:`stepflow.envs` or a remote generator (:mod:`stepflow.llm_gateway`).
"""

__version__ = "0.1.0"
