"""Global counters used to assert structural properties of the two forward paths.

The inference path must never touch the point branch or mutate pools; tests
reset these counters, run, and assert zeros.
"""


class Counters:
    __slots__ = ("knn_queries", "dynamic_affine_calls", "candidate_builds",
                 "pool_mutations")

    def __init__(self):
        self.reset()

    def reset(self):
        self.knn_queries = 0
        self.dynamic_affine_calls = 0
        self.candidate_builds = 0
        self.pool_mutations = 0

    def point_branch_total(self):
        return self.knn_queries + self.dynamic_affine_calls + self.candidate_builds

    def snapshot(self):
        return {name: getattr(self, name) for name in self.__slots__}


counters = Counters()
