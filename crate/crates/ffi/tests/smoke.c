#include <stdio.h>
#include <stdlib.h>
#include "dynsub.h"

int main(int argc, char **argv) {
    if (argc < 2) return 10;
    DslModel *m = NULL;
    if (dsl_model_load("/nonexistent/model.ckpt", &m) != DSL_STATUS_IO) return 11;
    char msg[256];
    if (dsl_last_error_message(msg, sizeof msg) == 0) return 12;
    if (dsl_model_load(argv[1], &m) != DSL_STATUS_OK) return 13;
    size_t c, h, w, d;
    if (dsl_model_shape(m, &c, &h, &w, &d) != DSL_STATUS_OK) return 14;
    size_t n = 2, len = n * c * h * w;
    float *img = malloc(len * sizeof(float));
    for (size_t i = 0; i < len; i++) img[i] = (float)(i % 7) / 7.0f;
    float *emb = malloc(n * d * sizeof(float));
    if (dsl_model_embed(m, img, n, emb, n * d) != DSL_STATUS_OK) return 15;
    double norm = 0;
    for (size_t i = 0; i < d; i++) norm += emb[i] * emb[i];
    if (norm < 0.999 || norm > 1.001) return 16;
    uint8_t a[4] = {1, 1, 0, 0}, b[4] = {1, 0, 0, 0};
    double dice;
    if (dsl_dice(a, b, 4, &dice) != DSL_STATUS_OK) return 17;
    printf("dice=%.6f d=%zu\n", dice, d);
    dsl_model_free(m);
    free(img);
    free(emb);
    return 0;
}
