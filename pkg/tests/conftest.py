"""Collection order: the acceptance gate runs after the unit suite.

Its directional-ablation check trains twelve models at default scale and
dominates total runtime; quick unit feedback should come first. Sorting is
stable, so order within each group is unchanged.
"""


def pytest_collection_modifyitems(session, config, items):
    items.sort(key=lambda item: "test_acceptance" in item.nodeid)
