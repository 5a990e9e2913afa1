"""Best-of-k step selection with the exact success-probability PRM on ArithChain.

    python demos/guided_search.py
"""
import numpy as np

from stepflow.envs import ArithChainEnv, EnvGenerator
from stepflow.prm import OraclePRM
from stepflow.search_eval import accuracy_eval, answer_judge, guided_search

env = ArithChainEnv(n_problems=200, seed=7)
prm = OraclePRM(env)

problem = env.problems()[0]
example = guided_search(problem, EnvGenerator(env), prm, k=8, rng=np.random.default_rng(0))
print(problem.statement)
print(example.text)
# the stop step is just one of the candidates, so even k=8 can miss it and walk past the target
print("correct" if answer_judge(problem, example.text) else "wrong", "\n")

for k in (1, 2, 4, 8):
    rng = np.random.default_rng(7)
    acc = accuracy_eval(env.problems(), lambda p: guided_search(p, EnvGenerator(env), prm, k=k, rng=rng))
    print(f"k={k}: accuracy {acc:.3f}")
