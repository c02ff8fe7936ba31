from cilforge.backbone import BackboneSpec

# small enough for finite differences over whole learners
TINY = BackboneSpec(kind="frozen_random", embed_dim=8, depth=3, heads=2, token_count=4,
                    input_dim=8, seed=3)
