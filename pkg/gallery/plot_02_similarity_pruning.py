"""
Pruning siblings by what they retrieved
=======================================

Sibling search nodes are compared by the Jaccard distance of their retrieved
passage ids. Average-linkage clustering groups them into ``k`` clusters and
the medoid of each cluster survives.
"""

from treeps.pruning import PassageSet, agglomerative_clusters, distance_matrix, select_representatives

siblings = [
    PassageSet.of(11, ["p1", "p2", "p3"]),
    PassageSet.of(12, ["p1", "p2", "p3"]),  # same retrieval as 11
    PassageSet.of(13, ["p1", "p2", "p9"]),
    PassageSet.of(14, ["p7", "p8", "p9"]),
    PassageSet.of(15, ["p7", "p8", "p5"]),
]

print(distance_matrix(siblings).round(2))

###############################################################################
# Two clusters: the p1/p2 group and the p7/p8 group.
for k in (1, 2, 3, 5):
    clusters = agglomerative_clusters(siblings, k)
    kept = select_representatives(siblings, k)
    print(f"k={k}: clusters {[[siblings[i].node_id for i in c] for c in clusters]} keep {kept}")

###############################################################################
# Linkage is a knob. On this small example all three choices agree.
print("single:", select_representatives(siblings, 2, linkage="single"))
print("complete:", select_representatives(siblings, 2, linkage="complete"))
