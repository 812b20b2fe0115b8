#!/usr/bin/env python3
"""Regenerates docs/sample_manifest.json, docs/sample_images/ and the
expected describe table docs/sample_describe.txt.

The table is computed here with the statistics module, independently of the
C++ code, and the test suite checks that `describe` reproduces it exactly.
"""
import json
import math
import random
import statistics
from pathlib import Path

DOCS = Path(__file__).resolve().parent.parent / "docs"
NUMERIC = ["sale_price", "lot_area", "living_area", "age", "full_bath", "half_bath",
           "three_quarter_bath", "parking", "hoa_fees", "drive_cbd", "walk_eschool",
           "walk_mschool", "walk_hschool", "married_pct", "median_income", "population"]
REGIONS = ["Central", "North", "South", "East", "Gunbarrel", "Rural"]
TYPES = ["Condominium", "Town-Home", "Single-Family"]


def photo(path, quality, rng, size=32):
    base = (128 + 70 * quality, 128 + 20 * quality, 128 - 70 * quality)
    period = rng.randint(3, 8)
    pixels = bytearray()
    for y in range(size):
        for x in range(size):
            tex = 20 if (x // period) % 2 else -20
            for c in range(3):
                pixels.append(max(0, min(255, round(base[c] + tex + rng.gauss(0, 8)))))
    path.write_bytes(b"P6\n%d %d\n255\n" % (size, size) + bytes(pixels))


def main():
    rng = random.Random(1018)
    images_dir = DOCS / "sample_images"
    images_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(24):
        pid = "S%02d" % (i + 1)
        living = rng.randrange(650, 4200, 10)
        quality = rng.uniform(-1, 1)
        per_sqft = 420 + 90 * quality + rng.gauss(0, 40)
        rec = {
            "id": pid,
            "sale_price": int(round(per_sqft * living, -3)),
            "lot_area": None if i % 7 == 3 else rng.randrange(1200, 15000, 50),
            "living_area": living,
            "age": rng.randint(0, 95),
            "full_bath": rng.randint(1, 3),
            "half_bath": rng.randint(0, 1),
            "three_quarter_bath": rng.randint(0, 1),
            "parking": rng.randint(0, 3),
            "hoa_fees": 0 if rng.random() < 0.5 else rng.randrange(600, 4800, 60),
            "drive_cbd": rng.randint(3, 35),
            "walk_eschool": rng.randint(4, 55),
            "walk_mschool": rng.randint(6, 70),
            "walk_hschool": rng.randint(8, 90),
            "married_pct": round(rng.uniform(25, 75), 1),
            "median_income": rng.randrange(45000, 190000, 500),
            "population": rng.randrange(1500, 28000, 10),
            "pool_sauna": None if i % 9 == 5 else int(rng.random() < 0.35),
            "solar": None if i % 11 == 7 else int(rng.random() < 0.2),
            "eschool_rank": rng.choice("ABC"),
            "mschool_rank": rng.choice("ABC"),
            "hschool_rank": "A",
            "region": rng.choice(REGIONS),
            "bedrooms": rng.randint(1, 5),
            "property_type": rng.choice(TYPES),
            "crime_level": rng.randint(1, 3),
            "images": [],
        }
        if i not in (6, 17):
            for k in range(rng.randint(1, 3)):
                name = "%s_%d.ppm" % (pid, k)
                photo(images_dir / name, quality, rng)
                rec["images"].append("sample_images/" + name)
        records.append(rec)
    (DOCS / "sample_manifest.json").write_text(json.dumps(records, indent=2) + "\n")

    lines = ["%-20s %6s %16s %16s %14s %14s %9s" % ("variable", "n", "mean", "std", "min", "max", "cv%")]
    for col in NUMERIC:
        values = [float(r[col]) for r in records if r[col] is not None]
        mean = statistics.fmean(values)
        std = statistics.stdev(values)
        cv = 0.0 if std == 0 else std / mean * 100
        lines.append("%-20s %6d %16.2f %16.2f %14.2f %14.2f %9.2f"
                     % (col, len(values), mean, std, min(values), max(values), cv))
    (DOCS / "sample_describe.txt").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
