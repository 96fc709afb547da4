"""From a reasoning response to a scalar reward, on the synthetic world.

Run: python3 demos/reward_tour.py
"""

from saliency_rl import build_world, format_reward, score_response

world = build_world(0)
print(f"World seed 0: {len(world.lexicon.names)} lexicon entries, {len(world.episodes)} episodes")

for ep in world.episodes:
    golden = world.vocab.decode(ep.golden_tokens)
    print(f"\n[{ep.task.value}] prompt {ep.prompt}, targets {list(ep.targets)}")
    print(f"  golden: {golden}")
    print(f"  reward: {score_response(world, ep, golden).as_record()}")

# Break the golden answer in a few ways and watch the reward fall.
ep = world.episodes[0]
golden = world.vocab.decode(ep.golden_tokens)
variants = {
    "no think block": golden.split("</think>", 1)[1],
    "wrong tag": golden.replace("<rg>", "<ins>").replace("</rg>", "</ins>"),
    "wrong object": golden.replace(ep.targets[-1], next(n for n in world.lexicon.names if n not in ep.targets)),
}
print(f"\nPerturbations of prompt {ep.prompt}:")
for name, raw in variants.items():
    v = format_reward(raw, ep.task)
    total = score_response(world, ep, raw)
    print(f"  {name:15s} r_struct={v.r_struct} r_tag={v.r_tag} r_total={total.r_total:.4f}")
