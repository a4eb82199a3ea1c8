"""Regenerate the tiny gradcheck fixture shipped in src/massedit/data/.

The stored gradients are brute-force central differences of the forward-only
meta loss in every editor parameter; no adjoint code is involved.
"""
import argparse

from massedit import gradcheck


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=gradcheck.FIXTURE_DIR)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eps", type=float, default=1e-6)
    args = ap.parse_args()
    inst = gradcheck.tiny_instance(args.seed)
    fd = gradcheck.fd_editor_gradient(inst, eps=args.eps)
    gradcheck.save_fixture(args.out, inst, fd, args.eps)
    print(f"wrote fixture to {args.out} ({sum(v.size for v in fd.values())} gradient entries)")


if __name__ == "__main__":
    main()
