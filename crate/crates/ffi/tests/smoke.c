#include <math.h>
#include <stdio.h>
#include "sts.h"

#define CHECK(call)                                                         \
    do {                                                                    \
        StsStatus st_ = (call);                                             \
        if (st_ != STS_STATUS_OK) {                                         \
            const char *m_ = sts_last_error_message();                      \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)st_, m_ ? m_ : ""); \
            return 1;                                                       \
        }                                                                   \
    } while (0)

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: smoke <bundle path>\n");
        return 2;
    }
    /* Three orthonormal prototypes in R^3. */
    const float z[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    const float views[12] = {0.8f, 0.6f, 0, 0.6f, 0.8f, 0, 0, 0.6f, 0.8f, 1, 0, 0};

    StsConfig cfg;
    CHECK(sts_config_default(&cfg));
    cfg.rho = 0.5;

    StsEngine *engine = NULL;
    CHECK(sts_engine_new(z, 3, 3, 10.0, &cfg, &engine));
    size_t c = 0, d = 0, k = 0;
    CHECK(sts_engine_shape(engine, &c, &d, &k));
    if (c != 3 || d != 3 || k < 1) {
        fprintf(stderr, "bad shape %zu %zu %zu\n", c, d, k);
        return 1;
    }

    double probs[3];
    size_t pred = 99;
    CHECK(sts_engine_adapt(engine, views, 4, 3, 0, probs, 3, &pred));
    double total = probs[0] + probs[1] + probs[2];
    if (fabs(total - 1.0) > 1e-9 || pred > 2) {
        fprintf(stderr, "bad output sum=%f pred=%zu\n", total, pred);
        return 1;
    }

    if (sts_engine_adapt(engine, views, 4, 3, 0, NULL, 3, &pred) != STS_STATUS_NULL_POINTER) {
        return 1;
    }
    if (sts_engine_adapt(engine, views, 4, 2, 0, probs, 3, &pred) != STS_STATUS_VALIDATION) {
        return 1;
    }
    sts_engine_free(engine);

    CHECK(sts_bundle_write(argv[1], z, 3, 3));
    StsBundle *b = NULL;
    CHECK(sts_bundle_read(argv[1], &b));
    const float *data = sts_bundle_data(b);
    for (int i = 0; i < 9; i++) {
        if (data[i] != z[i]) {
            return 1;
        }
    }
    if (sts_bundle_rows(b) != 3 || sts_bundle_cols(b) != 3) {
        return 1;
    }
    sts_bundle_free(b);

    if (sts_bundle_read("/nonexistent/x.stse", &b) != STS_STATUS_IO) {
        return 1;
    }
    printf("ok %s pred=%zu\n", sts_version(), pred);
    return 0;
}
