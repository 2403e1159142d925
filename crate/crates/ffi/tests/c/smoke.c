#include <stdio.h>
#include <stdlib.h>
#include "advdepth.h"

#define H 16
#define W 32

int main(void) {
    AdvdepthScene *scene = NULL;
    AdvdepthModel *model = NULL;
    static float image[3 * H * W], depth[H * W], pred[H * W], v[3 * H * W];
    double loss = -1.0, are = -1.0;

    if (advdepth_scene_generate(3, H, W, &scene) != ADVDEPTH_STATUS_OK) return 1;
    if (advdepth_scene_copy(scene, image, 3 * H * W, depth, H * W) != ADVDEPTH_STATUS_OK) return 2;
    if (advdepth_model_new(ADVDEPTH_ARCHITECTURE_MODEL_A, 1, &model) != ADVDEPTH_STATUS_OK) return 3;
    if (advdepth_model_predict(model, image, H, W, pred) != ADVDEPTH_STATUS_OK) return 4;
    if (advdepth_are(pred, depth, H * W, &are) != ADVDEPTH_STATUS_OK) return 5;
    if (advdepth_craft_scale(model, image, H, W, 0.1, 0.02, -1.0, 3, v, &loss) != ADVDEPTH_STATUS_OK) return 6;
    if (advdepth_model_predict(model, image, 0, W, pred) != ADVDEPTH_STATUS_SHAPE_ERROR) return 7;
    if (advdepth_last_error() == NULL) return 8;

    printf("version=%s are=%.6f loss=%.6f\n", advdepth_version(), are, loss);
    advdepth_model_free(model);
    advdepth_scene_free(scene);
    return 0;
}
