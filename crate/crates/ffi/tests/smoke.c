/* Loads a checkpoint through the C API and prints one line per task. */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "munet.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s CHECKPOINT_DIR\n", argv[0]);
        return 2;
    }
    MunetSystem *sys = NULL;
    if (munet_system_load(argv[1], &sys) != MUNET_STATUS_OK) {
        fprintf(stderr, "load failed: %s\n", munet_last_error());
        return 1;
    }
    size_t tasks = 0;
    munet_task_count(sys, &tasks);
    printf("version %s tasks %zu\n", munet_version(), tasks);

    enum { N = 3, H = 8, W = 8 };
    unsigned char pixels[N * H * W];
    for (size_t i = 0; i < sizeof pixels; i++) pixels[i] = (unsigned char)(i * 37u);

    for (size_t t = 0; t < tasks; t++) {
        const char *name = NULL;
        size_t classes = 0, need = 0;
        double accounted = 0.0;
        if (munet_task_name(sys, t, &name) != MUNET_STATUS_OK ||
            munet_task_num_classes(sys, name, &classes) != MUNET_STATUS_OK ||
            munet_accounted_params(sys, name, &accounted) != MUNET_STATUS_OK) {
            fprintf(stderr, "query failed: %s\n", munet_last_error());
            return 1;
        }
        if (munet_eval_logits(sys, name, pixels, N, H, W, 1, NULL, 0, &need) != MUNET_STATUS_BUFFER_TOO_SMALL ||
            need != N * classes) {
            fprintf(stderr, "size query failed\n");
            return 1;
        }
        float *logits = malloc(need * sizeof *logits);
        if (munet_eval_logits(sys, name, pixels, N, H, W, 1, logits, need, &need) != MUNET_STATUS_OK) {
            fprintf(stderr, "eval failed: %s\n", munet_last_error());
            return 1;
        }
        printf("task %s classes %zu accounted %.1f logit0 %.6f\n", name, classes, accounted, logits[0]);
        free(logits);
    }
    if (munet_task_num_classes(sys, "missing", &tasks) != MUNET_STATUS_UNKNOWN_TASK) return 1;
    munet_system_free(sys);
    return 0;
}
