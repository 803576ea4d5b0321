"""Regenerate the bundled map files under src/anisoplan/data."""
from pathlib import Path

from anisoplan.worldmodel import GridMap, save_map

DATA = Path(__file__).resolve().parents[1] / "src" / "anisoplan" / "data"


def doorway() -> GridMap:
    # 6 m x 10 m room split by a 0.4 m wall with a 1.2 m door
    return (GridMap.empty(60, 100, 0.1)
            .with_box(0.0, 4.8, 2.4, 5.2)
            .with_box(3.6, 4.8, 6.0, 5.2))


def corridor() -> GridMap:
    # 30 m x 8 m corridor with staggered partitions forcing a slalom
    g = GridMap.empty(300, 80, 0.1)
    for i, x in enumerate((6.0, 12.0, 18.0, 24.0)):
        g = g.with_box(x, 0.0, x + 0.6, 4.8) if i % 2 == 0 else g.with_box(x, 3.2, x + 0.6, 8.0)
    return g


if __name__ == "__main__":
    save_map(doorway(), DATA / "doorway.map")
    save_map(corridor(), DATA / "corridor.map")
    print("wrote", DATA / "doorway.map", DATA / "corridor.map")
