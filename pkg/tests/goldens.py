"""Hand-authored golden cases: exact-match scoring and aggregation decisions."""

# (prediction, gold aliases, expected)
EM_CASES = [
    ("Eiffel Tower", [["The Eiffel Tower"]], True),
    (None, [["Paris"]], False),
    ("Blue, Red", [["Red", "Blue"]], True),
    ("PARIS", [["paris"]], True),
    ("  U.S.A. ", [["USA"]], True),
    ("an apple", [["Apple"]], True),
    ("laughin", [["laughing"]], False),
    ("laughing", [["laughin"]], False),
    ("laughing", [["laughin"], ["laughing"]], True),
    ("Red and Blue", [["Red", "Blue"]], True),
    ("Red; Blue; Green", [["Green", "Blue", "Red"]], True),
    ("Red, Blue", [["Red", "Blue", "Green"]], False),
    ("Red, Red, Blue", [["Red", "Blue"]], False),
    ("Red, Blue, Red", [["Red", "Red", "Blue"]], True),
    ("1,928", [["1928"]], True),
    ("Paris", [["London"], ["Paris"]], True),
    ("Theater", [["Theatre"]], False),
    ("Rock & Roll", [["rock roll"]], True),
    ("“Casablanca”", [["Casablanca"]], True),
    ("", [["Paris"]], False),
    ("Paris, France", [["Paris"]], False),
    ("Mary-Kate", [["marykate"]], True),
    ("12 km", [["12km"]], False),
    ("The Beatles and The Who", [["Beatles", "Who"]], True),
]

# Synthesis triples for the aggregation cascade. Each result is
# (anchor, answer or None, uncertain, reasoning); ``aggregator`` is the
# scripted Stage III reply used only when the rule-3 path is reached.
CASCADE_CASES = [
    dict(name="unanimous", results=[("text", "Paris", False, "r"), ("table", "Paris", False, "r"),
                                    ("image", "Paris", False, "r")],
         expected=("Paris", "Majority")),
    dict(name="two-of-three", results=[("text", "Paris", False, "r"), ("table", "Paris", False, "r"),
                                       ("image", "London", False, "r")],
         expected=("Paris", "Majority")),
    dict(name="normalized-agreement", results=[("text", "The Eiffel Tower", True, "r"),
                                               ("table", "Berlin", False, "r"),
                                               ("image", "eiffel tower.", True, "r")],
         expected=("The Eiffel Tower", "Majority")),
    dict(name="majority-of-uncertain", results=[("text", "1928", True, "r"), ("table", "1928", True, "r"),
                                                ("image", "1931", False, "r")],
         expected=("1928", "Majority")),
    dict(name="two-uncertain-one-confident", results=[("text", "1928", True, "r"), ("table", "1931", True, "r"),
                                                      ("image", "42", False, "r")],
         expected=("42", "ConfidentOverUncertain")),
    dict(name="two-abstain-one-confident", results=[("text", None, True, "r"), ("table", None, True, "r"),
                                                    ("image", "42", False, "r")],
         expected=("42", "ConfidentOverUncertain")),
    dict(name="bimodal-confident-over-abstain", results=[("text", None, True, "r"), ("table", "Oslo", False, "r")],
         expected=("Oslo", "ConfidentOverUncertain")),
    dict(name="all-abstain", results=[("text", None, True, "r"), ("table", None, True, "r"),
                                      ("image", None, True, "r")],
         expected=(None, "AllAbstained")),
    dict(name="bimodal-all-abstain", results=[("table", None, True, "r"), ("image", None, True, "r")],
         expected=(None, "AllAbstained")),
    dict(name="rule3-model-picks", results=[("text", "Red", False, "r"), ("table", "Blue", False, "r"),
                                            ("image", None, True, "r")],
         aggregator="REASONING: Blue cites the table row\nFINAL ANSWER: Blue",
         expected=("Blue", "BestRationale")),
    dict(name="rule3-all-uncertain", results=[("text", "Red", True, "r"), ("table", "Blue", True, "r"),
                                              ("image", "Green", True, "r")],
         aggregator="FINAL ANSWER: Green",
         expected=("Green", "BestRationale")),
    dict(name="rule3-unparseable-fallback", results=[("text", "Red", False, "short"),
                                                     ("table", "Blue", False, "the longest rationale"),
                                                     ("image", "Green", False, "medium one")],
         aggregator="I would go with the second agent.",
         expected=("Blue", "BestRationale")),
]
