#!/usr/bin/env python3
"""Regenerates the bundled corpora from two small probabilistic grammars.

data/sample_corpus.txt (65536 bytes): plain narrative prose. Base training,
recovery and evaluation draw disjoint byte ranges from it.

data/calibration_corpus.txt (16384 bytes): a richer grammar with a larger
vocabulary, names and dialogue. Calibration samples come from here, so
importance is estimated on text the model was not trained on.
"""

import random
import sys

SAMPLE_SIZE = 65536
CALIBRATION_SIZE = 16384

# --- grammar A -------------------------------------------------------------

SUBJECTS = [
    "the old miller", "a young sailor", "the village baker", "my grandmother",
    "the river keeper", "a tired traveler", "the schoolteacher", "our neighbor",
    "the blacksmith", "a quiet child", "the harbor master", "the gardener",
    "a wandering poet", "the night watchman", "the weaver", "her brother",
]
VERBS_T = [
    "carried", "found", "painted", "repaired", "watched", "sold", "opened",
    "counted", "cleaned", "borrowed", "followed", "remembered", "built", "mended",
]
VERBS_I = [
    "laughed", "waited", "slept", "sang", "wandered", "listened", "worked",
    "rested", "smiled", "hurried", "returned", "whistled",
]
OBJECTS = [
    "a wooden boat", "the heavy basket", "an old lantern", "the broken gate",
    "a letter from the city", "the red kettle", "a bag of flour", "the iron key",
    "a map of the coast", "the stone bridge", "a jar of honey", "the window",
    "a small garden", "the evening bread", "a pair of boots", "the silver coin",
]
PLACES = [
    "by the river", "near the market", "in the kitchen", "on the hill",
    "behind the mill", "at the harbor", "under the oak tree", "in the square",
    "along the shore", "inside the barn", "beside the well", "in the valley",
]
TIMES = [
    "in the morning", "before dawn", "after supper", "every spring",
    "on a rainy day", "late at night", "during the winter", "at noon",
    "when the bells rang", "once the fog lifted",
]
ADJS = ["quiet", "bright", "cold", "warm", "narrow", "busy", "empty", "green", "grey", "calm"]
NOUNS = ["road", "sky", "house", "field", "sea", "town", "forest", "room", "street", "lake"]
CONNECT = ["and then", "but", "so", "while", "because", "although"]


def clause(rng):
    s = rng.choice(SUBJECTS)
    if rng.random() < 0.6:
        c = f"{s} {rng.choice(VERBS_T)} {rng.choice(OBJECTS)}"
    else:
        c = f"{s} {rng.choice(VERBS_I)}"
    if rng.random() < 0.5:
        c += " " + rng.choice(PLACES)
    if rng.random() < 0.3:
        c += " " + rng.choice(TIMES)
    return c


def sentence(rng):
    r = rng.random()
    if r < 0.15:
        text = f"the {rng.choice(NOUNS)} was {rng.choice(ADJS)} and {rng.choice(ADJS)}"
    elif r < 0.55:
        text = clause(rng)
    else:
        text = f"{clause(rng)}, {rng.choice(CONNECT)} {clause(rng)}"
    text = text[0].upper() + text[1:]
    return text + rng.choice([".", ".", ".", "!", "?"])


# --- grammar B -------------------------------------------------------------

NAMES = [
    "Ada", "Bram", "Cora", "Dmitri", "Elsa", "Farid", "Greta", "Hugo", "Ines", "Jonas",
    "Kira", "Lev", "Mira", "Nils", "Olga", "Pavel", "Quinn", "Rosa", "Soren", "Tove",
    "Ugo", "Vera", "Wim", "Yara", "Zeno",
]
ROLES = [
    "miller", "sailor", "baker", "river keeper", "traveler", "schoolteacher", "neighbor",
    "blacksmith", "child", "harbor master", "gardener", "poet", "night watchman", "weaver",
    "carpenter", "fisherman", "shepherd", "clerk", "doctor", "merchant", "potter", "farmer",
    "soldier", "widow", "priest", "mapmaker", "cook", "tailor", "ferryman", "glassblower",
]
ROLE_ADJS = [
    "old", "young", "tired", "quiet", "clever", "stubborn", "cheerful", "nervous", "patient",
    "careless", "gentle", "proud", "hungry", "honest", "restless", "lonely", "famous", "strange",
]
VERBS_T_B = [
    "carried", "found", "painted", "repaired", "watched", "sold", "opened", "counted",
    "cleaned", "borrowed", "followed", "remembered", "built", "mended", "buried", "stole",
    "weighed", "polished", "traded", "hid", "lost", "measured", "burned", "wrapped", "tasted",
    "described", "questioned", "ignored", "admired", "delivered", "collected", "dropped",
]
VERBS_I_B = [
    "laughed", "waited", "slept", "sang", "wandered", "listened", "worked", "rested", "smiled",
    "hurried", "returned", "whistled", "argued", "prayed", "shivered", "danced", "complained",
    "vanished", "hesitated", "stumbled", "wept", "lingered",
]
OBJ_ADJS = [
    "wooden", "heavy", "old", "broken", "red", "small", "silver", "cracked", "painted", "empty",
    "dusty", "bright", "crooked", "forgotten", "sealed", "golden", "torn", "iron", "blue",
    "narrow", "muddy", "fragile", "stolen", "curious",
]
OBJECTS_B = [
    "boat", "basket", "lantern", "gate", "letter", "kettle", "bag of flour", "key", "map",
    "bridge", "jar of honey", "window", "garden", "loaf", "pair of boots", "coin", "ladder",
    "barrel", "mirror", "blanket", "violin", "clock", "saddle", "net", "candle", "book",
    "ring", "bucket", "hammer", "chest", "compass", "scarf", "wagon", "drum", "bottle",
]
PLACES_B = [
    "by the river", "near the market", "in the kitchen", "on the hill", "behind the mill",
    "at the harbor", "under the oak tree", "in the square", "along the shore", "inside the barn",
    "beside the well", "in the valley", "past the chapel", "across the marsh", "at the crossroads",
    "on the roof", "below the cliffs", "in the cellar", "near the old fort", "by the orchard",
]
TIMES_B = [
    "in the morning", "before dawn", "after supper", "every spring", "on a rainy day",
    "late at night", "during the winter", "at noon", "when the bells rang", "once the fog lifted",
    "the next day", "for three days", "before the storm", "in the autumn of that year",
    "long ago", "on the first of May",
]
ADVERBS = ["slowly", "quickly", "quietly", "carefully", "angrily", "gladly", "secretly", "twice"]
ADJS_B = [
    "quiet", "bright", "cold", "warm", "narrow", "busy", "empty", "green", "grey", "calm",
    "wild", "dark", "strange", "crowded", "peaceful", "bitter", "golden", "silent",
]
NOUNS_B = [
    "road", "sky", "house", "field", "sea", "town", "forest", "room", "street", "lake",
    "winter", "market", "church", "wind", "harbor", "night",
]
CONNECT_B = ["and then", "but", "so", "while", "because", "although", "until", "before", "after"]
SPEECH = ["said", "asked", "whispered", "shouted", "replied", "muttered"]
NUMBERS = ["two", "three", "four", "five", "seven", "ten", "twelve", "forty", "a hundred"]
COUNTABLE = ["days", "coins", "miles", "sheep", "letters", "years", "candles", "steps"]


def subject_b(rng):
    r = rng.random()
    if r < 0.35:
        return rng.choice(NAMES)
    if r < 0.7:
        return f"the {rng.choice(ROLE_ADJS)} {rng.choice(ROLES)}"
    if r < 0.85:
        return f"{rng.choice(NAMES)} the {rng.choice(ROLES)}"
    return f"the {rng.choice(ROLES)}"


def thing_b(rng):
    art = rng.choice(["the", "a", "her", "his", "their", "that"])
    if rng.random() < 0.6:
        return f"{art} {rng.choice(OBJ_ADJS)} {rng.choice(OBJECTS_B)}"
    return f"{art} {rng.choice(OBJECTS_B)}"


def clause_b(rng):
    c = subject_b(rng)
    if rng.random() < 0.2:
        c += " " + rng.choice(ADVERBS)
    if rng.random() < 0.6:
        c += f" {rng.choice(VERBS_T_B)} {thing_b(rng)}"
    else:
        c += f" {rng.choice(VERBS_I_B)}"
    if rng.random() < 0.5:
        c += " " + rng.choice(PLACES_B)
    if rng.random() < 0.3:
        c += " " + rng.choice(TIMES_B)
    return c


def sentence_b(rng):
    r = rng.random()
    if r < 0.1:
        text = f"the {rng.choice(NOUNS_B)} was {rng.choice(ADJS_B)} and {rng.choice(ADJS_B)}"
    elif r < 0.2:
        text = (f"{subject_b(rng)} had {rng.choice(NUMBERS)} {rng.choice(COUNTABLE)} "
                f"and {rng.choice(NUMBERS)} {rng.choice(COUNTABLE)}")
    elif r < 0.3:
        quote = clause_b(rng)
        quote = quote[0].upper() + quote[1:]
        end = rng.choice([".", "?", "!"])
        return f'"{quote}{end}" {rng.choice(SPEECH)} {subject_b(rng)}.'
    elif r < 0.6:
        text = clause_b(rng)
    else:
        text = f"{clause_b(rng)}, {rng.choice(CONNECT_B)} {clause_b(rng)}"
    text = text[0].upper() + text[1:]
    return text + rng.choice([".", ".", ".", "!", "?"])



def generate(sentence_fn, seed, size):
    rng = random.Random(seed)
    out = []
    length = 0
    paragraph = []
    while length < size:
        paragraph.append(sentence_fn(rng))
        if len(paragraph) >= rng.randint(3, 7):
            p = " ".join(paragraph) + "\n\n"
            out.append(p)
            length += len(p)
            paragraph = []
    return "".join(out).encode("ascii")[:size]


def main():
    outdir = sys.argv[1] if len(sys.argv) > 1 else "data"
    with open(f"{outdir}/sample_corpus.txt", "wb") as f:
        f.write(generate(sentence, 20230511, SAMPLE_SIZE))
    with open(f"{outdir}/calibration_corpus.txt", "wb") as f:
        f.write(generate(sentence_b, 20230512, CALIBRATION_SIZE))


if __name__ == "__main__":
    main()
