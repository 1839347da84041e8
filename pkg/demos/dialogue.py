"""Drive the agent turn by turn and print the state summary after each turn.

The summary is what a contextual parser would see as its context string.

    python3 demos/dialogue.py
"""
from dlgc.dialogue import Runtime, agent_policy, apply_user_turn, DialogueState, summarize
from dlgc.skills import load_skills, snapshot
from dlgc.synth import build_parser_index, expand, load_templates, turn_pairs

TURNS = [
    "show me restaurants serving chinese",
    "only the ones with price range cheap",
    "book a table at the first one",
    "4 people",
    "yes",
]


def main():
    reg = load_skills()
    templates = load_templates()
    pairs = expand(reg, templates, depth=2, limit=10 ** 6) + turn_pairs(reg, templates)
    rt = Runtime(snapshot(reg), index=build_parser_index(pairs, reg))
    state = DialogueState()
    for utt in TURNS:
        typed = rt.index.resolve(state, utt, rt.registry)
        state = apply_user_turn(state, typed, rt)
        agent = agent_policy(state, rt)
        state = agent.state
        print(f"user:  {utt}")
        print(f"agent: {agent.utterance}   [{agent.label}]")
        print(f"state: {summarize(state)}\n")


if __name__ == "__main__":
    main()
