#include <stdio.h>
#include <string.h>

#include "isup_grading.h"

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: smoke CHECKPOINT MISSING\n");
        return 2;
    }
    uint8_t grade = 0;
    if (isup_grade_from_gleason(4, 3, &grade) != ISUP_STATUS_OK || grade != 3) return 10;
    if (isup_grade_from_gleason(1, 3, &grade) != ISUP_STATUS_INVALID_INPUT) return 11;
    if (isup_last_error_message() == NULL) return 12;

    IsupGrader *g = NULL;
    if (isup_grader_load(argv[2], 0, &g) != ISUP_STATUS_IO || g != NULL) return 20;
    if (isup_grader_load(argv[1], 0, &g) != ISUP_STATUS_OK || g == NULL) {
        fprintf(stderr, "%s\n", isup_last_error_message());
        return 21;
    }
    size_t side = isup_grader_patch_size(g);
    static uint8_t rgb[512 * 512 * 3];
    for (size_t i = 0; i < sizeof rgb; i += 3) {
        rgb[i] = 200;
        rgb[i + 1] = (uint8_t)(100 + (i / 3) % 50);
        rgb[i + 2] = 190;
    }
    IsupPrediction p;
    memset(&p, 0, sizeof p);
    if (isup_grader_predict_rgb(g, rgb, 512, 512, &p) != ISUP_STATUS_OK) {
        fprintf(stderr, "%s\n", isup_last_error_message());
        return 30;
    }
    printf("version %s patch %zu grade %u malignancy %.4f outputs %zu patches %zu\n",
           isup_version(), side, p.grade, p.malignancy, p.n_outputs, p.n_patches);
    isup_grader_free(g);
    return p.grade <= 5 && p.n_outputs == 5 ? 0 : 31;
}
