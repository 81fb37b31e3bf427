#!/usr/bin/env python3
"""Regenerates the bundled fixtures in this directory.

Everything here is synthetic and seeded. The toy corpus is laid out so that
exactly 172 homophone candidates (36/34/28/40/34 per slang word) clear the
default combination-frequency threshold of 100 under the mini pinyin table,
and the dataset pool carries exactly 167 slang-bearing instances split
60/51/22/22/12. The recorded-response cassettes stand in for the external QE
models, the emotion classifier, and a remote language model.

Run from this directory: python3 make_fixtures.py
"""

import hashlib
import itertools
import json
import math
import random

SEED = 20241015
COMBO_MIN = 100

SLANG = [
    # word, count in dataset, gloss, literal MT rendering, candidates to keep
    ("尼玛", 60, "(f**k) your mother", "Nima", 36),
    ("特么", 51, "what's the f**k", "Tema", 34),
    ("卧槽", 22, "f**k", "Lying trough", 28),
    ("草泥马", 22, "f**k your mother", "Grass mud horse", 40),
    ("劳资", 12, "I", "Labor and capital", 34),
]

# Human-rated top five per slang word, best first.
TOP5 = {
    "尼玛": ["你妈", "尼妈", "泥马", "尼马", "泥玛"],
    "特么": ["他妈", "她妈", "它妈", "踏妈", "他玛"],
    "卧槽": ["我操", "我艹", "窝艹", "窝操", "我草"],
    "劳资": ["老子", "老资", "老自", "劳子", "劳自"],
    "草泥马": ["艹泥马", "操你妈", "艹你妈", "草你妈", "草尼妈"],
}

MODELS = [
    # name, signal, noise, bump for improved translations
    ("FT-COMETKIWI", 0.32, 1.00, -0.20),
    ("FT-TransQuest", 0.30, 1.00, -0.03),
    ("CFT-TransQuest", 0.34, 1.00, -0.10),
    ("MTL-XLM-V_base", 0.27, 0.95, 0.00),
    ("MTL-XLM-R_large", 0.24, 0.90, 0.22),
    ("Mixtral-8x7B", 0.22, 1.10, 0.15),
    ("Deepseek-67B", 0.25, 1.00, 0.10),
    ("FT-Yi-34B", 0.38, 0.85, 0.45),
    ("FT-Deepseek-67B", 0.33, 0.85, 0.40),
]
LM_MODEL = "qwen1.5-7b-sim"
LABELS = ["anger", "joy", "sadness", "surprise", "fear", "neutral"]

FILLER = [
    "今天", "真的", "气人", "服了", "好热", "上班", "下班", "加班", "吃饭", "睡觉",
    "看剧", "朋友", "同事", "领导", "考试", "又", "挂了", "哈哈哈", "无语", "烦死了",
    "开心", "难过", "到底", "怎样", "周末", "地铁", "堵车", "外卖", "迟到", "快递",
]
PUNCT = ["，", "！", "。", "？", "…"]

# (zh, en) phrase pairs used to build dataset sentences.
PHRASES = [
    ("今天又加班到十点", "I worked overtime until ten again today"),
    ("这天气热死了", "this weather is killing me"),
    ("地铁又堵了", "the subway is jammed again"),
    ("外卖迟到一个小时", "the takeaway is an hour late"),
    ("考试全挂了", "I failed all the exams"),
    ("领导又开会", "the boss called another meeting"),
    ("快递丢了", "the parcel got lost"),
    ("朋友放我鸽子", "my friend stood me up"),
    ("周末还得上班", "I still have to work on the weekend"),
    ("手机屏幕碎了", "my phone screen cracked"),
    ("电影太好看了", "the movie was so good"),
    ("终于放假了", "the holiday is finally here"),
    ("排队排了三小时", "I queued for three hours"),
    ("工资还没发", "the salary still has not been paid"),
    ("房租又涨了", "the rent went up again"),
    ("比赛输了", "we lost the match"),
    ("猫把花瓶打碎了", "the cat broke the vase"),
    ("闹钟没响", "the alarm did not go off"),
    ("雨下个不停", "the rain will not stop"),
    ("网速慢得要命", "the internet is painfully slow"),
]
OPENERS = [("", ""), ("真是", "really "), ("唉，", "sigh, "), ("哈哈，", "haha, "), ("天啊，", "oh god, ")]

EXTRA_ERRORS = [("破防", 7), ("内卷", 6), ("躺平", 5), ("绝绝子", 8), ("凡尔赛", 4), ("离谱", 9), ("上头", 3)]

COMMON_WORDS = [
    "今天", "天气", "加班", "上班", "下班", "朋友", "同事", "领导", "考试", "周末",
    "地铁", "外卖", "快递", "手机", "电影", "放假", "工资", "房租", "比赛", "闹钟",
    "你妈", "他妈", "老子", "我操", "什么", "真是", "哈哈",
]


def load_table():
    char_to_syl = {}
    syl_to_chars = {}
    with open("pinyin_mini.tsv", encoding="utf-8") as f:
        for line in f:
            c, s = line.rstrip("\n").split("\t")
            char_to_syl.setdefault(c, []).append(s)
            syl_to_chars.setdefault(s, [])
            if c not in syl_to_chars[s]:
                syl_to_chars[s].append(c)
    return char_to_syl, syl_to_chars


def candidate_pool(word, char_to_syl, syl_to_chars):
    positions = []
    for c in word:
        chars = set()
        for s in char_to_syl[c]:
            chars.update(syl_to_chars[s])
        positions.append(sorted(chars))
    pool = {"".join(p) for p in itertools.product(*positions)}
    pool.discard(word)
    return sorted(pool)


def count_overlapping(text_lines, needle):
    total = 0
    for line in text_lines:
        start = 0
        while True:
            i = line.find(needle, start)
            if i < 0:
                break
            total += 1
            start = i + 1
    return total


def request_hash(path, body):
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(f"POST {path}\n{canon}".encode("utf-8")).hexdigest()


def unit(*parts):
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()
    return int(h[:13], 16) / float(16 ** 13)


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False, separators=(",", ":")) + "\n")


def build_corpus(rng, char_to_syl, syl_to_chars):
    table_chars = set(char_to_syl)
    for frag in FILLER + PUNCT:
        assert not (set(frag) & table_chars), frag

    pools = {w: candidate_pool(w, char_to_syl, syl_to_chars) for w, *_ in SLANG}
    keep = {}
    for word, _, _, _, n_keep in SLANG:
        if word == "草泥马":
            continue
        forced = [c for c in TOP5[word] if c in pools[word]]
        rest = [c for c in pools[word] if c not in forced]
        rng.shuffle(rest)
        keep[word] = forced + rest[: n_keep - len(forced)]
    # Three-character candidates embed a ni-ma suffix; only allow suffixes that
    # are already kept (or the original) so the two-character tally is stable.
    ok_suffix = set(keep["尼玛"]) | {"尼玛"}
    cnm_allowed = [c for c in pools["草泥马"] if c[1:] in ok_suffix]
    forced = TOP5["草泥马"]
    rest = [c for c in cnm_allowed if c not in forced]
    rng.shuffle(rest)
    keep["草泥马"] = forced + rest[:35]

    mentions = []
    for word, *_ in SLANG:
        for cand in keep[word]:
            mentions += [cand] * rng.randint(101, 160)
        dropped = [c for c in pools[word] if c not in keep[word]]
        if word == "草泥马":
            dropped = [c for c in dropped if c[1:] in ok_suffix]
        rng.shuffle(dropped)
        for cand in dropped[:20]:
            mentions += [cand] * rng.randint(1, 60)
        mentions += [word] * 50
    rng.shuffle(mentions)

    lines = []
    i = 0
    while i < len(mentions):
        n = rng.randint(2, 5)
        parts = []
        for m in mentions[i : i + n]:
            parts.append(rng.choice(FILLER))
            parts.append(m)
            parts.append(rng.choice(PUNCT))
        if rng.random() < 0.5:
            parts.append(rng.choice(FILLER))
        lines.append("".join(parts))
        i += n

    # Verify the intended partition with an independent substring count.
    kept_total = 0
    for word, _, _, _, n_keep in SLANG:
        above = [c for c in pools[word] if count_overlapping(lines, c) > COMBO_MIN]
        assert sorted(above) == sorted(keep[word]), (word, len(above), n_keep)
        assert len(above) == n_keep
        kept_total += len(above)
    assert kept_total == 172
    return lines, pools, keep


def build_dataset(rng):
    instances = []
    slang_rows = []
    extra_budget = []
    for w, n in EXTRA_ERRORS:
        extra_budget += [w] * n
    rng.shuffle(extra_budget)
    distractor_extras = extra_budget[:33]
    selected_extras = extra_budget[33:]

    seen_sources = set()
    idx = 0

    def fresh(make):
        while True:
            src, mt, spans = make()
            if src not in seen_sources:
                seen_sources.add(src)
                return src, mt, spans

    for word, count, gloss, literal, _ in SLANG:
        slang_rows.append({"word": word, "frequency": count, "gloss": gloss})
        for _ in range(count):
            extra = selected_extras.pop() if selected_extras and rng.random() < 0.15 else None

            def make():
                op_zh, op_en = rng.choice(OPENERS)
                zh, en = rng.choice(PHRASES)
                zh2, en2 = rng.choice(PHRASES)
                src = f"{op_zh}{word}，{zh}"
                spans = [[len(op_zh), len(op_zh) + len(word)]]
                if extra:
                    src += f"，{extra}"
                    start = len(src) - len(extra)
                    spans.append([start, len(src)])
                src += f"，{zh2}！"
                mt_prefix = f"{op_en}{literal}" if op_en else literal
                mt = f"{mt_prefix}, {en}, {en2}!"
                return src, (mt, mt_prefix, op_en, en, en2), spans

            src, (mt, mt_prefix, op_en, en, en2), spans = fresh(make)
            idx += 1
            lit_start = len(op_en)
            instances.append({
                "id": f"hq-{idx:04d}",
                "source": src,
                "mt": mt,
                "qe_score": round(rng.uniform(0.2, 1.0), 4),
                "src_error_spans": spans,
                "tgt_error_spans": [[lit_start, lit_start + len(literal)]],
                "reference": f"{op_en}{gloss[0].upper() + gloss[1:]}, {en}; {en2}.",
                "emotion_label": rng.choices(LABELS, weights=[6, 2, 3, 1, 1, 2])[0],
                "_slang": word,
                "_fix": f"{op_en}{gloss}, {en}, {en2}!",
            })
    assert not selected_extras, len(selected_extras)

    for extra in distractor_extras:
        def make():
            zh, en = rng.choice(PHRASES)
            zh2, en2 = rng.choice(PHRASES)
            src = f"{zh}，{extra}，{zh2}。"
            start = len(zh) + 1
            return src, f"{en}, {extra}, {en2}.", [[start, start + len(extra)]]

        src, mt, spans = fresh(make)
        idx += 1
        instances.append({
            "id": f"hq-{idx:04d}",
            "source": src,
            "mt": mt,
            "qe_score": round(rng.uniform(0.2, 1.0), 4),
            "src_error_spans": spans,
            "tgt_error_spans": [],
            "reference": f"{mt[0].upper()}{mt[1:]}",
            "emotion_label": rng.choice(LABELS),
            "_slang": None,
        })
    rng.shuffle(instances)
    for inst in instances:
        for w, *_ in SLANG:
            n = inst["source"].count(w)
            assert n == (1 if inst["_slang"] == w else 0), (inst, w)
    return instances, slang_rows


def main():
    rng = random.Random(SEED)
    char_to_syl, syl_to_chars = load_table()

    lines, pools, keep = build_corpus(rng, char_to_syl, syl_to_chars)
    with open("weibo_toy.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")

    with open("corpus_10.txt", "w", encoding="utf-8") as f:
        f.write("\n".join([
            "妈妈说今天下雨",
            "我妈在家",
            "今天好冷",
            "妈呀",
            "你妈说得对",
            "今天今天",
            "下雨了妈",
            "好冷好冷",
            "今天妈在",
            "天天向上",
        ]) + "\n")
    with open("corpus_32.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(["你好你好今天下雨", "你们你们说了算数", "下雨你不要出门啊", "开心你就笑你来了"]) + "\n")

    instances, slang_rows = build_dataset(rng)
    write_jsonl("hadqaet_pool.jsonl", [
        {k: v for k, v in inst.items() if not k.startswith("_")} for inst in instances
    ])
    write_jsonl("slang_table1.jsonl", slang_rows)
    selected = [i for i in instances if i["_slang"]]
    write_jsonl("fixes_m2g1.jsonl", [{"id": i["id"], "mt": i["_fix"]} for i in selected])
    rules = []
    for w, *_ in SLANG:
        for rep in TOP5[w]:
            rules.append({"original": w, "replacement": rep, "side": "source"})
    write_jsonl("rules_top5.jsonl", rules)

    words = sorted({w for w, *_ in SLANG} | {w for w, _ in EXTRA_ERRORS} | set(COMMON_WORDS))
    with open("words.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(words) + "\n")

    with open("qe_models.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(m[0] for m in MODELS) + "\n")

    # Groups as the perturbation stage builds them.
    groups = {"G0": [(i["source"], i["mt"]) for i in selected]}
    for rank in range(5):
        def perturb(src):
            for w, *_ in SLANG:
                src = src.replace(w, TOP5[w][rank])
            return src
        groups[f"M1G{rank + 1}"] = [(perturb(i["source"]), i["mt"]) for i in selected]
    groups["M2G1"] = [(i["source"], i["_fix"]) for i in selected]
    groups["M2G2"] = [(i["source"], i["reference"]) for i in selected]
    gold = {i["source"]: i["qe_score"] for i in selected}
    gold_by_pos = [i["qe_score"] for i in selected]

    qe = {}
    for name, signal, noise, bump in MODELS:
        for gname, pairs in groups.items():
            for pos, (src, mt) in enumerate(pairs):
                body = {"model": name, "source": src, "mt": mt}
                u = unit(name, src, mt) - 0.5
                score = signal * gold_by_pos[pos] + noise * u + (bump if gname.startswith("M2") else 0.0)
                qe[request_hash("/v1/qe", body)] = {"score": round(score, 6)}
    write_jsonl("cassettes/qe.jsonl", [{"request_hash": h, "response": r} for h, r in sorted(qe.items())])

    emo = {}
    gold_label = [i["emotion_label"] for i in selected]
    for gname in ["G0", "M1G1", "M1G2", "M1G3", "M1G4", "M1G5"]:
        for pos, (src, _) in enumerate(groups[gname]):
            u = unit("emotion", src)
            if u < 0.88:
                label = gold_label[pos]
            else:
                label = LABELS[int(unit("emotion-alt", src) * len(LABELS))]
            emo[request_hash("/v1/emotion", {"text": src})] = {"label": label}
    write_jsonl("cassettes/emotion.jsonl", [{"request_hash": h, "response": r} for h, r in sorted(emo.items())])

    # Remote LM: one batched request per slang word, candidates in generation
    # order (descending combination count, then code point).
    char_counts = {}
    for line in lines:
        for c in line:
            char_counts[c] = char_counts.get(c, 0) + 1
    total = sum(char_counts.values())
    lm = {}
    for w, *_ in SLANG:
        ordered = sorted(keep[w], key=lambda c: (-count_overlapping(lines, c), c))
        lps = []
        for c in ordered:
            base = sum(math.log(char_counts.get(ch, 0.5) / total) for ch in c)
            lps.append(round(0.8 * base - 3.0 * unit(LM_MODEL, c), 6))
        body = {"model": LM_MODEL, "texts": ordered}
        lm[request_hash("/v1/logprob", body)] = {"logprobs": lps}
    write_jsonl("cassettes/logprob.jsonl", [{"request_hash": h, "response": r} for h, r in sorted(lm.items())])

    # Two annotators, both session modes, all 172 candidates.
    ratings = []
    context_for = {}
    for inst in selected:
        context_for.setdefault(inst["_slang"], inst["source"])
    for w, *_ in SLANG:
        for cand in sorted(keep[w]):
            if cand in TOP5[w]:
                q = 5 - TOP5[w].index(cand) // 2
            else:
                q = 1 + int(unit("quality", cand) * 4.999)
            for mode in (True, False):
                for ann in ("a1", "a2"):
                    jitter = 0 if ann == "a1" else int(unit("jitter", cand, str(mode)) * 3) - 1
                    ratings.append({
                        "candidate_text": cand,
                        "original_text": w,
                        "annotator_id": ann,
                        "score": max(1, min(5, q + jitter)),
                        "context_shown": mode,
                        "source_context": context_for[w] if mode else None,
                    })
    write_jsonl("ratings.jsonl", ratings)

    print(f"corpus lines={len(lines)} chars={total} instances={len(instances)} selected={len(selected)}")
    print(f"qe={len(qe)} emotion={len(emo)} logprob={len(lm)} ratings={len(ratings)}")


if __name__ == "__main__":
    main()
