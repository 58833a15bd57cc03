#!/usr/bin/env python3
"""Recipe runner for the acceptance-criterion reproductions.

Recipes are data (JSON files under repro/recipes/), not prose: each one is a
fixed-seed CLI/test sequence plus machine-checkable expectations. This script
is the only imperative glue.

Usage:
    python3 repro/run.py all          # run every recipe in manifest.json
    python3 repro/run.py 07           # run one criterion (plus dependencies)
    python3 repro/run.py 00-prep      # run the shared training recipe only

Recipe schema:
    {
      "id": "07-ordering",
      "requires": ["00-prep"],            # run first (cached once per session)
      "description": "...",
      "steps": [
        {"run": ["kvzap", "eval", "--out", "${REPRO}/out/...", ...]},
        {"run": ["cargo", "test", ...], "env": {"KVZAP_ACCEPT_CACHE": "..."}},
        {"copy": ["out/prep/teacher/teacher.kvzl", "out/cache/teacher.kvzl"]}
      ],
      "checks": [
        {"kind": "stdout_contains", "needle": "..."},          # any step's stdout
        {"kind": "contains", "file": "...", "needle": "..."},
        {"kind": "file_exists", "file": "..."},
        {"kind": "json_gt", "a": ["file.json", "dotted.path"],
                            "b": ["file.json", "dotted.path"]},
        {"kind": "json_ge", "a": ["file.json", "dotted.path"], "value": 0.4}
      ]
    }

"${REPRO}" in any string expands to the absolute path of this directory.
"kvzap" as argv[0] resolves to target/release/kvzap if built, otherwise to
`cargo run --release -q -p kvzap-cli --`. All commands run from the repo root.
"""

import json
import os
import pathlib
import shutil
import subprocess
import sys

REPRO = pathlib.Path(__file__).resolve().parent
REPO = REPRO.parent


def kvzap_argv():
    built = REPO / "target" / "release" / "kvzap"
    if built.exists():
        return [str(built)]
    return ["cargo", "run", "--release", "-q", "-p", "kvzap-cli", "--"]


def sub(value):
    if isinstance(value, str):
        return value.replace("${REPRO}", str(REPRO))
    if isinstance(value, list):
        return [sub(v) for v in value]
    return value


def json_path(spec):
    path, dotted = sub(spec[0]), spec[1]
    node = json.loads(pathlib.Path(path).read_text())
    for key in dotted.split("."):
        node = node[int(key)] if isinstance(node, list) else node[key]
    return node


def run_steps(recipe):
    """Run all steps, returning (ok, concatenated stdout+stderr)."""
    log = []
    for step in recipe["steps"]:
        if "copy" in step:
            src, dst = (REPRO / sub(p) for p in step["copy"])
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)
            print(f"  copy {src.name} -> {dst.relative_to(REPRO)}")
            continue
        argv = sub(step["run"])
        if argv[0] == "kvzap":
            argv = kvzap_argv() + argv[1:]
        env = dict(os.environ)
        env.pop("KVZAP_OUT", None)  # would redirect every --out directory
        for key, value in step.get("env", {}).items():
            env[key] = sub(value)
        print(f"  $ {' '.join(step['run'])}")
        proc = subprocess.run(
            argv, cwd=REPO, env=env, text=True,
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
        )
        sys.stdout.write(proc.stdout)
        log.append(proc.stdout)
        if proc.returncode != 0:
            print(f"  step failed with exit code {proc.returncode}")
            return False, "\n".join(log)
    return True, "\n".join(log)


def run_checks(recipe, stdout):
    ok = True
    for check in recipe.get("checks", []):
        kind = check["kind"]
        if kind == "stdout_contains":
            passed = check["needle"] in stdout
            label = f"stdout contains {check['needle']!r}"
        elif kind == "contains":
            text = pathlib.Path(sub(check["file"])).read_text()
            passed = check["needle"] in text
            label = f"{check['file']} contains {check['needle']!r}"
        elif kind == "file_exists":
            passed = pathlib.Path(sub(check["file"])).is_file()
            label = f"{check['file']} exists"
        elif kind == "json_gt":
            a, b = json_path(check["a"]), json_path(check["b"])
            passed = a > b
            label = f"{check['a'][1]} {a:.4f} > {check['b'][1]} {b:.4f}"
        elif kind == "json_ge":
            a = json_path(check["a"])
            passed = a >= check["value"]
            label = f"{check['a'][1]} {a:.4f} >= {check['value']}"
        else:
            raise ValueError(f"unknown check kind {kind!r}")
        print(f"  check {'ok  ' if passed else 'FAIL'} {label}")
        ok &= passed
    return ok


def prep_is_cached(recipe):
    """The shared prep recipe is idempotent: skip it when its outputs exist."""
    for name in recipe.get("skip_if_exists", []):
        if not (REPRO / sub(name)).is_file():
            return False
    return bool(recipe.get("skip_if_exists"))


def run_recipe(rid, done):
    if rid in done:
        return done[rid]
    recipe = json.loads((REPRO / "recipes" / f"{rid}.json").read_text())
    for dep in recipe.get("requires", []):
        if not run_recipe(dep, done):
            done[rid] = False
            return False
    print(f"== recipe {rid}: {recipe.get('description', '')}")
    if prep_is_cached(recipe):
        print("  outputs already present; skipping")
        done[rid] = True
        return True
    steps_ok, stdout = run_steps(recipe)
    ok = steps_ok and run_checks(recipe, stdout)
    print(f"== recipe {rid}: {'PASS' if ok else 'FAIL'}")
    done[rid] = ok
    return ok


def main():
    manifest = json.loads((REPRO / "manifest.json").read_text())
    targets = sys.argv[1:] or ["all"]
    ids = []
    for t in targets:
        if t == "all":
            ids.extend(e["recipe"] for e in manifest["criteria"])
        else:
            matches = [e["recipe"] for e in manifest["criteria"]
                       if e["criterion"] == t or e["recipe"] == t]
            ids.extend(matches if matches else [t])
    done = {}
    results = [(rid, run_recipe(rid, done)) for rid in ids]
    print("\nSummary:")
    for rid, ok in results:
        print(f"  {rid}: {'PASS' if ok else 'FAIL'}")
    sys.exit(0 if all(ok for _, ok in results) else 1)


if __name__ == "__main__":
    main()
