"""
Diagnosing intervention combinations
====================================

Each intervention gets a pathological vector: its average rank on weight
magnitude, effective rank and sharpness across attack scenarios. How far
apart two members sit (PD) says how differently they act. The
sweeper-converter-connector recipe picks one member from each role.
"""

from itertools import combinations

from plastidoor.diagnosis import (
    CONNECTORS, CONVERTERS, SWEEPERS, load_reference_vectors, pairwise_distance, pathological_diagnosis,
    scc_compose,
)

vectors = load_reference_vectors()
complete = {k: v for k, v in vectors.items() if v.complete}
for k, v in vectors.items():
    print(f"{k:>4}: {v.components}")

for a, b in combinations(sorted(complete), 2):
    print(f"distance {a}-{b}: {pairwise_distance(complete[a], complete[b]):.4f}")
print(f"PD(wd + ln) = {pathological_diagnosis([complete['wd'], complete['ln']]):.4f}")

# Every sweeper x converter x connector recipe, with PD where the vectors allow it.
for s in SWEEPERS:
    for c in CONVERTERS:
        for n in CONNECTORS:
            spec, pd = scc_compose(s, c, n)
            print(f"{spec.name:<18} PD = {'n/a' if pd is None else f'{pd:.4f}'}")

# The packaged SAM vector is partial, so the recipes above have no PD yet.
# A full eight-setting suite fills the gaps: `plastidoor diagnose --records
# out/records.csv --combination swiss_cheese` recomputes every vector first.
