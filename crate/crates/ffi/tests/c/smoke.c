#include <stdio.h>
#include <string.h>
#include "gqa.h"

#define CHECK(cond) do { if (!(cond)) { fprintf(stderr, "failed: %s (line %d)\n", #cond, __LINE__); return 1; } } while (0)

int main(void) {
    uint8_t score = 99;
    CHECK(gqa_parse_score("Score: 7/10", &score) == GQA_STATUS_OK && score == 7);
    CHECK(gqa_parse_score("eleven", &score) == GQA_STATUS_PARSE_FAILURE);
    CHECK(gqa_last_error() != NULL);

    size_t tokens = 0;
    CHECK(gqa_count_tokens("abcdefg", &tokens) == GQA_STATUS_OK && tokens == 2);

    char *key = NULL;
    CHECK(gqa_make_user_key("g", "u", &key) == GQA_STATUS_OK && strcmp(key, "g|u") == 0);
    gqa_string_free(key);

    GqaEngine *engine = NULL;
    CHECK(gqa_engine_open_demo(&engine) == GQA_STATUS_OK);
    char *json = NULL;
    CHECK(gqa_engine_query(engine, "openmmlab-dev", "c", "How do I install mmdeploy with pip?", 1709287200, &json)
          == GQA_STATUS_OK);
    CHECK(strstr(json, "\"state\":\"sent\"") != NULL);
    gqa_string_free(json);
    CHECK(gqa_engine_withdraw(engine, "missing", &json) == GQA_STATUS_NOT_FOUND);
    gqa_engine_free(engine);
    printf("ok\n");
    return 0;
}
