"""Smoke test for the pystoryplan extension module.

Build and install first:  maturin develop --release  (or pip install .)
"""

import math
import os
import sys
import tempfile

import pystoryplan as sp


def main() -> int:
    cfg = sp.RunConfig(overrides=["seed=11", "train.mcsm.epochs=3"])
    assert cfg.seed == 11
    assert "epochs = 3" in cfg.to_toml()
    try:
        sp.RunConfig.from_toml("nonsense = 1")
    except sp.StoryplanError as e:
        assert "nonsense" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    # Triangle plus a pendant edge.
    assert sp.maximal_cliques(4, [(0, 1), (1, 2), (0, 2), (2, 3)]) == [[0, 1, 2], [2, 3]]

    e = math.exp(-1.0)
    s, s_c, s_i = sp.score_clique([[0.5, e], [e, 0.5]], [1.0, 1.0], [[0], [1]], [0, 1])
    assert abs(s_c + 1.0) < 1e-9 and abs(s_i) < 1e-12

    n = 50
    block = {1, 7, 12, 18, 25, 31, 33, 40, 48}
    cm = [[0.9 if i in block and j in block else 0.1 for j in range(n)] for i in range(n)]
    images = [list(range(i * 10, (i + 1) * 10)) for i in range(5)]
    plan = sp.tau_search(cm, [0.5] * n, images)
    assert plan["members"] == sorted(block), plan

    assert abs(sp.harmonic_mean(45.30, 40.90) - 42.99) < 0.01
    assert sp.concept_prf({"a", "b"}, [{"a", "c"}, {"a", "b"}]) == (1.0, 1.0, 1.0)
    assert sp.distinct_n([["a", "b", "a", "b"]], 2) == 2 / 3
    assert abs(sp.pearson([1, 2, 3], [2, 4, 7]) - 0.9933992677987828) < 1e-12
    try:
        sp.pearson([1, 1], [2, 3])
    except sp.StoryplanError:
        pass
    else:
        raise AssertionError("constant series accepted")
    assert sp.corpus_bleu([["a", "b", "c", "d"]], [[["a", "b", "c", "d"]]]) == 1.0
    assert sp.rouge_l(["a", "b"], [["a", "b"]]) == 1.0
    cands = [[f"c{i}_{j}" for j in range(10)] for i in range(5)]
    assert abs(sp.rand_expected_f(cands, {"c0_0", "c1_0", "c2_0"}) - 0.1) < 1e-12
    assert sp.template_sentence(["dog"]) == "there was a dog ."

    with tempfile.TemporaryDirectory() as d:
        data = os.path.join(d, "data")
        assert sp.run_cli(["synth-data", "--out", data, "--sequences", "20"]) == 0
        assert os.path.exists(os.path.join(data, "train.jsonl"))
        assert sp.run_cli(["no-such-command"]) == 1

    print("pystoryplan smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
