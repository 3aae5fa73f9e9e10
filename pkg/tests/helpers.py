"""Shared oracles and fixtures for the test suite."""

import numpy as np

# (criterion number, report line), filled by the acceptance tests
ACCEPTANCE_LINES = []


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def tiny_model_gradient_errors(loss_kind, seed=0):
    """Gradient check on a 4-token, 8-wide, 2-head model with one 16-unit hidden layer.

    Returns (err32, err64): the f32 tape gradient against 64-bit central
    differences, and the f64 tape gradient against the same differences.
    """
    from uasparse import numerics as nx
    from uasparse.model import ModelConfig, ParserModel, TaskKind

    task = TaskKind.SOFTWARE_NAME if loss_kind == "bce" else TaskKind.SOFTWARE_VERSION
    config = ModelConfig(seq_len=4, d_model=8, num_heads=2, ff_dim=16, head_widths=(16,),
                         dropout_p=0.0, num_outputs=task.num_outputs, seed=seed)
    rng = np.random.default_rng(seed + 100)
    values = rng.normal(size=(3, 4, 8))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1], [1, 0, 0, 0]], dtype=bool)
    targets = rng.integers(0, task.num_outputs, size=3)

    def loss_of(model):
        scores = model.forward(values, mask)
        if loss_kind == "ce":
            return nx.cross_entropy_loss(scores, targets)
        onehot = np.eye(task.num_outputs)[targets]
        return nx.binary_cross_entropy_loss(nx.softmax(scores, axis=-1), onehot)

    m64 = ParserModel(task, config, dtype=np.float64)
    m32 = m64.astype(np.float32)
    loss_of(m64).backward()
    loss_of(m32).backward()
    analytic64, analytic32, fd = [], [], []
    for name, t in m64.params.items():
        fd.append(numeric_grad(lambda: float(loss_of(m64).data), t.data).ravel())
        analytic64.append(t.grad.ravel())
        analytic32.append(m32.params[name].grad.ravel())
    fd = np.concatenate(fd)
    return rel_err(np.concatenate(analytic32), fd), rel_err(np.concatenate(analytic64), fd)


# Visible rows of the CIDR scoring example table: (cidr, parsed tuple, per-UAS base score)
CIDR_EXAMPLE_ROWS = [
    ("1.123.0.0/24", ("Windows", "8.1", "Internet Explorer", "11"), 6.15814104),
    ("1.123.0.0/24", ("Android", "12", "Chrome", "105.0.0.0"), 6.57974525),
    ("1.123.0.0/24", ("Android", "11", "Chrome", "105.0.0.0"), 6.07651594),
    ("101.127.0.0/24", ("Android", None, "Android WebView", "105.0.5195.136"), 5.79486228),
    ("101.127.0.0/24", ("Android", "12", "Facebook App", "379.1.0.23.114"), 5.80187262),
    ("101.127.0.0/24", ("Windows", "10", "Internet Explorer", "11"), 6.39906788),
]


def cidr_example_fixture():
    """Parsed rows plus an offline CVE fixture whose per-UAS base means hit the table values.

    Several rows share a CPE (Chrome 105, IE 11, Android 12), so CVEs placed on
    a shared CPE count for every row that uses it. Rows whose CPEs are all
    shared are filled first; every other row then adds three CVEs to a CPE no
    other row uses, sized so that the row's deduplicated mean is the target.
    """
    from collections import Counter

    from uasparse.vulnscore import AliasTable, ParsedUas, to_cpe_candidates

    aliases = AliasTable.load()
    parsed = [ParsedUas(*tup, source_cidr=cidr) for cidr, tup, _ in CIDR_EXAMPLE_ROWS]
    cpes = [[str(c) for c in to_cpe_candidates(p, aliases)] for p in parsed]
    usage = Counter(c for row in cpes for c in row)
    fixture = {c: [] for c in usage}

    def existing(row):
        seen = {}
        for c in cpes[row]:
            for e in fixture[c]:
                seen[e["cve_id"]] = e["base"]
        return list(seen.values())

    order = sorted(range(len(parsed)), key=lambda r: any(usage[c] == 1 for c in cpes[r]))
    for row in order:
        target = CIDR_EXAMPLE_ROWS[row][2]
        private = [c for c in cpes[row] if usage[c] == 1]
        home = private[0] if private else cpes[row][0]
        have = existing(row)
        centre = (target * (len(have) + 3) - sum(have)) / 3
        for k, offset in enumerate((-1.25, 0.5, 0.75)):
            fixture[home].append({"cve_id": f"CVE-2022-{row}{k:03d}", "base": centre + offset,
                                  "exploitability": 2.0 + 0.1 * k, "impact": 3.5,
                                  "cvss_version": "3.1"})
    return parsed, fixture


def brute_force_mean(fixture, cpes):
    by_id = {}
    for c in cpes:
        for e in fixture.get(c, []):
            by_id.setdefault(e["cve_id"], e)
    if not by_id:
        return None
    vals = list(by_id.values())
    return tuple(sum(e[k] for e in vals) / len(vals) for k in ("base", "exploitability", "impact"))


def random_cve_case(rng):
    """Random parsed tuple and fixture with overlapping CVE ids across CPEs."""
    from uasparse.vulnscore import AliasTable, ParsedUas, to_cpe_candidates

    os_name = rng.choice(["Android", "Windows", "iOS"])
    sw = rng.choice(["Chrome", "Opera", "Instagram"])
    p = ParsedUas(os_name, str(rng.integers(8, 14)), sw, f"{rng.integers(90, 110)}.0")
    cpes = [str(c) for c in to_cpe_candidates(p, AliasTable.load())]
    pool = [f"CVE-{i}" for i in range(rng.integers(1, 12))]
    scores = {cid: [round(float(x), 1) for x in rng.uniform(0, 10, 3)] for cid in pool}
    fixture = {}
    for c in cpes:
        chosen = rng.choice(pool, size=rng.integers(0, len(pool) + 1), replace=False)
        fixture[c] = [{"cve_id": cid, "base": scores[cid][0], "exploitability": scores[cid][1],
                       "impact": scores[cid][2], "cvss_version": "3.1"} for cid in chosen]
    return p, cpes, fixture
