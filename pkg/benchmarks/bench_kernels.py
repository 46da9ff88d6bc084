"""Compare the numba and numpy kernels on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Reports the best wall time per call and checks that both backends agree.
"""

import argparse
import time

import numpy as np

from stylediff import kernels


def best_time(fn, repeat):
    fn()  # warm up (and trigger numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    # a batch of 8 utterances: 40 tokens over 300 frames
    logits = rng.normal(size=(8, 300, 40))
    log_soft = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    m_lens = rng.integers(200, 301, 8)
    n_lens = rng.integers(20, 41, 8)
    # Griffin-Lim synthesis of a 5 s utterance
    frames = rng.normal(size=(401, 1024))
    yield "forward_backward", lambda nb: kernels.forward_backward(log_soft, m_lens, n_lens, use_numba=nb)
    yield "viterbi", lambda nb: kernels.viterbi(log_soft, m_lens, n_lens, use_numba=nb)
    yield "overlap_add", lambda nb: kernels.overlap_add(frames, 200, 80000 + 1024, use_numba=nb)


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-9, atol=1e-9, equal_nan=True)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speed-up':>10}  agree")
    for name, call in cases(rng):
        t_nb = best_time(lambda: call(True), args.repeat)
        t_np = best_time(lambda: call(False), args.repeat)
        ok = agree(call(True), call(False))
        print(f"{name:<18}{1e3 * t_nb:>10.2f}{1e3 * t_np:>10.2f}{t_np / t_nb:>9.1f}x  {ok}")


if __name__ == "__main__":
    main()
