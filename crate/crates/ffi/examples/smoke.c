#include <stdio.h>
#include <stdlib.h>

#include "convprune.h"

#define CHECK(call)                                                          \
    do {                                                                     \
        CpStatus s_ = (call);                                                \
        if (s_ != CP_STATUS_OK) {                                            \
            fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,          \
                    cp_last_error_message());                                \
            return 1;                                                        \
        }                                                                    \
    } while (0)

int main(void) {
    CpModel *model = NULL, *pruned = NULL;
    size_t in[3], feat[3], total, remaining, written;
    double achieved, k;

    CHECK(cp_model_init_tinynet(7, &model));
    CHECK(cp_model_input_shape(model, in));
    CHECK(cp_model_feature_shape(model, feat));
    CHECK(cp_model_prune_h1(model, 0.5, &pruned, &achieved));
    CHECK(cp_model_weight_counts(pruned, &total, &remaining));

    size_t n = in[0] * in[1] * in[2];
    double *image = malloc(n * sizeof(double));
    double *desc = malloc(feat[0] * sizeof(double));
    for (size_t i = 0; i < n; i++) image[i] = (double)(i % 17) / 17.0;
    CHECK(cp_model_descriptor(pruned, image, n, CP_POOLING_RMAC, 3, desc, feat[0], &written));
    CHECK(cp_similarity(desc, desc, written, &k));

    if (cp_model_prune_h1(model, 1.5, &pruned, NULL) != CP_STATUS_INVALID_ARGUMENT) return 2;

    printf("input %zux%zux%zu features %zu kept %zu/%zu achieved %.6f self-similarity %.12f\n",
           in[0], in[1], in[2], written, remaining, total, achieved, k);
    free(image);
    free(desc);
    cp_model_free(pruned);
    cp_model_free(model);
    return 0;
}
