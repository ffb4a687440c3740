"""Trainable-parameter accounting against published model geometries.

Each adapted module of shape n x m contributes M*r*m + N*n*r trainable
entries per layer; the reported percentage is trainable / (base + trainable).
The bundled geometry files describe the seven adapted linear modules of two
public decoder models, and the numbers below reproduce their published
parameter-budget rows exactly.
"""

from cola_forge import bundled_geometry, param_count

for name in ("llama31_8b", "llama32_3b"):
    geo = bundled_geometry(name)
    print(f"{geo.name}: {geo.base_params:,} base parameters, "
          f"{geo.layers} layers, modules:")
    for mod in geo.modules:
        print(f"    {mod.name:10s} {mod.n:>6d} x {mod.m}")
    print(f"  {'M':>2s} {'N':>2s} {'r':>3s} {'trainable':>12s} {'%param':>8s}")
    for a_count, b_count, rank in [(1, 1, 8), (1, 3, 8), (2, 3, 8),
                                   (1, 1, 16), (1, 1, 64), (4, 10, 8)]:
        trainable, percent = param_count(geo, a_count, b_count, rank)
        print(f"  {a_count:>2d} {b_count:>2d} {rank:>3d} {trainable:>12,d} "
              f"{percent:>8.4f}")
    print()

print("the same numbers are available from the command line, e.g.:")
print("  cola-forge params --geometry llama31_8b.json --M 1 --N 3 --r 8")
