"""Standing query over the restaurant table.

Watches for well-rated chinese places and books a table whenever one appears.
Three ticks: a new restaurant opens, nothing changes, an old one is rerated.

    python3 demos/monitor.py
"""
from dlgc import syntax as S
from dlgc import types as T
from dlgc.execute import run_monitor
from dlgc.skills import Mutation, bump_dataset, load_skills, snapshot
from dlgc.typecheck import typecheck_program

PROGRAM = ('@Transaction.Execute; monitor(@Yelp.Restaurant(), contains(cuisines, "chinese") '
           '&& rating >= 4.4) => @Yelp.Book(restaurant=id, people=2);')


def main():
    reg = snapshot(load_skills(only=["Yelp"]))
    typed = typecheck_program(S.parse_program(PROGRAM), reg)
    stmt = typed.program.statements[0]
    print(S.print(typed.program))

    qb, ab = reg.backends["Yelp"]
    template = next(r for r in qb.rows("Restaurant") if r["id"].id == "golden-dragon")
    opening = dict(template, id=T.Entity("Yelp:Restaurant", "lucky-star", "Lucky Star"),
                   rating=T.Number(4.7))
    script = {
        1: Mutation("insert", record=opening),
        2: Mutation("noop"),
        3: Mutation("update", id="panda-house", changes={"rating": T.Number(4.6)}),
    }

    def step(tick):
        bump_dataset(qb, "Restaurant", script[tick])
        print(f"tick {tick}: {script[tick].kind}")

    for tick, rows, outcomes in run_monitor(stmt, reg, max_ticks=3, step=step):
        for row, out in zip(rows, outcomes):
            print(f"  fired on {row['id'].display}: {out.message}")
    print(f"bookings made: {len(ab.effects)}")


if __name__ == "__main__":
    main()
